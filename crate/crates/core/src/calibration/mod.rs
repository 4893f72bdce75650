//! Threshold calibration: analytic ARL approximations, their inversion, EDD
//! and window-length heuristics, plus Monte Carlo estimation.
//!
//! The analytic ARL for threshold `b` and window `w` is
//!
//! ```text
//! ARL ≈ (√(2π) / b) / Σ_{B=2}^{w} exp(ψ_B(θ_B) − θ_B·b) · (2B−1)/(B(B−1)) · ν(θ_B·√(2(2B−1)/(B(B−1))))
//! ```
//!
//! where `θ_B` solves `ψ_B'(θ) = b` for a truncated cumulant series `ψ_B`.

mod monte_carlo;

pub use monte_carlo::{
    calibrate_threshold_mc, monte_carlo_arl, monte_carlo_edd, ArlSummary, EddSummary, McCalibration, McOptions,
    Progress, ProgressFn, TrialPool,
};

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};

use crate::error::{Error, Result};
use crate::moments::MomentEstimates;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArlMethod {
    /// `ψ_B(θ) = θ²/2`, `θ_B = b`.
    GaussianOrder,
    /// Cubic truncation of `ψ_B` using the H0 skewness of `Z_B`.
    SkewnessCorrected,
    MonteCarlo,
}

impl std::str::FromStr for ArlMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "gaussian_order" => Ok(Self::GaussianOrder),
            "skew" | "skewness" | "skewness_corrected" => Ok(Self::SkewnessCorrected),
            "mc" | "monte_carlo" => Ok(Self::MonteCarlo),
            other => Err(Error::invalid(format!(
                "unknown calibration method '{other}' (expected gaussian, skew or mc)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub target_arl: f64,
    pub method: ArlMethod,
    pub predicted_arl: f64,
    pub w: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_b_theta: Option<Vec<f64>>,
    /// Smallest block size scanned; 2 unless the scan region was narrowed.
    #[serde(default = "two")]
    pub b_min: usize,
    /// Present for Monte Carlo calibration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub censored_fraction: Option<f64>,
}

fn two() -> usize {
    2
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Overshoot correction `ν(μ) = (2/μ)(Φ(μ/2) − ½) / ((μ/2)Φ(μ/2) + φ(μ/2))`.
pub fn nu(mu: f64) -> Result<f64> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::invalid(format!("nu requires a finite mu > 0, got {mu}")));
    }
    let half = mu / 2.0;
    // Φ(x) − ½ = ½·erf(x/√2) keeps precision for small mu
    let num = (2.0 / mu) * 0.5 * erf(half / std::f64::consts::SQRT_2);
    let den = half * std_normal_cdf(half) + std_normal_pdf(half);
    Ok(num / den)
}

/// Root of `θ + m3·θ²/2 = b`, the stationary point of the cubic truncation.
pub fn skew_theta(b: f64, m3: f64) -> Result<f64> {
    let disc = 1.0 + 2.0 * b * m3;
    if disc < 0.0 {
        return Err(Error::Infeasible(
            "skewness correction infeasible; fall back to gaussian_order".into(),
        ));
    }
    // rationalized form of (−1 + √disc)/m3, exact as m3 → 0
    Ok(2.0 * b / (1.0 + disc.sqrt()))
}

fn check_args(b: f64, b_min: usize, w: usize) -> Result<()> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::invalid(format!("threshold b must be finite and > 0, got {b}")));
    }
    if w < 2 {
        return Err(Error::invalid(format!("window length w must be >= 2, got {w}")));
    }
    if b_min < 2 || b_min > w {
        return Err(Error::invalid(format!("b_min must lie in [2, w={w}], got {b_min}")));
    }
    Ok(())
}

/// `θ_B` for each `B` in `b_min..=w`.
pub fn thetas(b: f64, b_min: usize, w: usize, m: &MomentEstimates, method: ArlMethod) -> Result<Vec<f64>> {
    check_args(b, b_min, w)?;
    (b_min..=w)
        .map(|bs| match method {
            ArlMethod::GaussianOrder => Ok(b),
            ArlMethod::SkewnessCorrected => skew_theta(b, m.third_moment_h0(bs)?),
            ArlMethod::MonteCarlo => Err(Error::invalid("monte_carlo has no analytic ARL")),
        })
        .collect()
}

/// Analytic ARL over the scan region `B ∈ [b_min, w]`.
pub fn arl_approx_range(b: f64, b_min: usize, w: usize, m: &MomentEstimates, method: ArlMethod) -> Result<f64> {
    let th = thetas(b, b_min, w, m, method)?;
    // log-sum-exp keeps large b from underflowing
    let mut logs = Vec::with_capacity(th.len());
    for (bs, &theta) in (b_min..=w).zip(&th) {
        let bf = bs as f64;
        let ratio = (2.0 * bf - 1.0) / (bf * (bf - 1.0));
        let psi = match method {
            ArlMethod::SkewnessCorrected => {
                let m3 = m.third_moment_h0(bs)?;
                theta * theta / 2.0 + m3 * theta.powi(3) / 6.0
            }
            _ => theta * theta / 2.0,
        };
        let v = nu(theta * (2.0 * ratio).sqrt())?;
        logs.push(psi - theta * b + ratio.ln() + v.ln());
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    Ok((2.0 * std::f64::consts::PI).sqrt() / b * (-log_sum).exp())
}

/// Analytic ARL for the full scan region `B ∈ [2, w]`.
pub fn arl_approx(b: f64, w: usize, m: &MomentEstimates, method: ArlMethod) -> Result<f64> {
    arl_approx_range(b, 2, w, m, method)
}

/// Collapsed Gaussian-order form `√(2π)·b·exp(b²/2) / w`, valid for large `w`.
pub fn arl_gaussian_collapsed(b: f64, w: usize) -> Result<f64> {
    check_args(b, 2, w)?;
    Ok((2.0 * std::f64::consts::PI).sqrt() * b * (b * b / 2.0).exp() / w as f64)
}

const BRACKET: (f64, f64) = (0.1, 50.0);
const REL_TOL: f64 = 1e-10;

/// Smallest `b` (to relative tolerance) with `arl(b) >= gamma` for a
/// nondecreasing map; the bracket widens upward when needed.
pub fn invert_monotone<F>(gamma: f64, mut arl: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(gamma > 1.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!(
            "target ARL must be finite and > 1, got {gamma}"
        )));
    }
    let (mut lo, mut hi) = BRACKET;
    if arl(lo)? >= gamma {
        return Err(Error::Infeasible(format!(
            "target ARL {gamma} is already met at b = {lo}; nothing to calibrate"
        )));
    }
    let mut widen = 0;
    while arl(hi)? < gamma {
        lo = hi;
        hi *= 2.0;
        widen += 1;
        if widen > 8 {
            return Err(Error::Infeasible(format!(
                "target ARL {gamma} unreachable for b <= {hi}"
            )));
        }
    }
    while hi - lo > REL_TOL * hi {
        let mid = 0.5 * (lo + hi);
        if arl(mid)? >= gamma {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Threshold meeting target ARL `gamma` under an analytic model, scanning
/// `B ∈ [b_min, w]`.
pub fn threshold_for_arl_range(
    gamma: f64,
    b_min: usize,
    w: usize,
    m: &MomentEstimates,
    method: ArlMethod,
) -> Result<CalibrationResult> {
    if method == ArlMethod::MonteCarlo {
        return Err(Error::invalid("use calibrate_threshold_mc for monte_carlo calibration"));
    }
    check_args(1.0, b_min, w)?;
    let b = invert_monotone(gamma, |b| arl_approx_range(b, b_min, w, m, method))?;
    Ok(CalibrationResult {
        threshold: b,
        target_arl: gamma,
        method,
        predicted_arl: arl_approx_range(b, b_min, w, m, method)?,
        w,
        per_b_theta: Some(thetas(b, b_min, w, m, method)?),
        b_min,
        stderr: None,
        censored_fraction: None,
    })
}

pub fn threshold_for_arl(gamma: f64, w: usize, m: &MomentEstimates, method: ArlMethod) -> Result<CalibrationResult> {
    threshold_for_arl_range(gamma, 2, w, m, method)
}

/// First-order delay prediction `b / (ρ·D)`.
pub fn edd_predict(b: f64, rho: f64, d_hat: f64) -> Result<f64> {
    if !(d_hat > 0.0) {
        return Err(Error::Infeasible("change undetectable with this kernel".into()));
    }
    if !(b > 0.0 && rho > 0.0) {
        return Err(Error::invalid("b and rho must be > 0"));
    }
    Ok(b / (rho * d_hat))
}

/// Window length trading detection delay against memory:
/// `ceil(max(7b/(ρD), 6b/(ρD) + 512K²·log(3/ε) / (b²·min(N/4, b/(ρD)))))`.
pub fn recommend_window(b: f64, rho: f64, d_hat: f64, k_bound: f64, n_blocks: usize, eps: f64) -> Result<usize> {
    if !(d_hat > 0.0) {
        return Err(Error::Infeasible("change undetectable with this kernel".into()));
    }
    if !(b > 0.0 && rho > 0.0 && k_bound > 0.0 && n_blocks > 0) {
        return Err(Error::invalid("b, rho, K and N must be > 0"));
    }
    if !(eps > 0.0 && eps < 3.0) {
        return Err(Error::invalid(format!("eps must lie in (0, 3), got {eps}")));
    }
    let delay = b / (rho * d_hat);
    let floor = 7.0 * delay;
    let optimal =
        6.0 * delay + 512.0 * k_bound * k_bound * (3.0 / eps).ln() / (b * b * (n_blocks as f64 / 4.0).min(delay));
    let w = floor.max(optimal).ceil();
    if !w.is_finite() || w > 1e9 {
        return Err(Error::Infeasible(format!("recommended window {w} is not usable")));
    }
    Ok((w as usize).max(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn moments(c1: f64, c2: f64, third: [f64; 6], n: usize) -> MomentEstimates {
        MomentEstimates::from_raw(c1, c2, third, n, 100, 0).unwrap()
    }

    fn gaussianish() -> MomentEstimates {
        moments(0.08, 0.004, [4e-5, 2e-5, 1e-6, 5e-4, 5e-5, 1e-6], 15)
    }

    #[test]
    fn nu_values() {
        assert_relative_eq!(nu(2.0).unwrap(), 0.31509, epsilon = 1e-4);
        assert_relative_eq!(nu(0.5).unwrap(), 0.73615, epsilon = 1e-4);
        assert_relative_eq!(nu(1e-9).unwrap(), 1.0, epsilon = 1e-8);
        assert!(nu(0.0).is_err());
        assert!(nu(-1.0).is_err());
        let grid: Vec<f64> = (1..=1000).map(|i| nu(i as f64 / 100.0).unwrap()).collect();
        assert!(grid.windows(2).all(|p| p[1] < p[0]));
        assert!(grid.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn collapsed_form() {
        assert_relative_eq!(arl_gaussian_collapsed(3.0, 50).unwrap(), 13.538, epsilon = 1e-3);
        let b = invert_monotone(5000.0, |b| arl_gaussian_collapsed(b, 50)).unwrap();
        assert!((b - 4.47).abs() < 0.01, "{b}");
        assert!(arl_gaussian_collapsed(b, 50).unwrap() >= 5000.0);
    }

    #[test]
    fn skew_theta_examples() {
        assert_relative_eq!(skew_theta(3.0, 0.5).unwrap(), 2.0, epsilon = 1e-12);
        assert_eq!(skew_theta(3.0, 0.0).unwrap(), 3.0);
        for &(b, m3) in &[(3.0, 0.5), (5.0, 0.02), (4.0, -0.1), (2.0, 1e-12)] {
            let th = skew_theta(b, m3).unwrap();
            assert!((th + m3 * th * th / 2.0 - b).abs() < 1e-9);
        }
        assert!(matches!(skew_theta(3.0, -0.2), Err(Error::Infeasible(_))));
    }

    #[test]
    fn arl_is_monotone() {
        let m = gaussianish();
        let bs: Vec<f64> = (10..60).map(|i| i as f64 / 10.0).collect();
        let arls: Vec<f64> = bs
            .iter()
            .map(|&b| arl_approx(b, 50, &m, ArlMethod::GaussianOrder).unwrap())
            .collect();
        assert!(arls.windows(2).all(|p| p[1] > p[0]));
        let ws: Vec<f64> = (3..80)
            .map(|w| arl_approx(3.5, w, &m, ArlMethod::GaussianOrder).unwrap())
            .collect();
        assert!(ws.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn zero_skew_matches_gaussian_order() {
        let m = moments(0.08, 0.004, [0.0; 6], 15);
        for b in [2.0, 3.5, 5.0] {
            let g = arl_approx(b, 50, &m, ArlMethod::GaussianOrder).unwrap();
            let s = arl_approx(b, 50, &m, ArlMethod::SkewnessCorrected).unwrap();
            assert_relative_eq!(g, s, max_relative = 1e-12);
        }
    }

    #[test]
    fn threshold_round_trip_and_ordering() {
        let m = gaussianish();
        for method in [ArlMethod::GaussianOrder, ArlMethod::SkewnessCorrected] {
            let r500 = threshold_for_arl(500.0, 50, &m, method).unwrap();
            let r2000 = threshold_for_arl(2000.0, 50, &m, method).unwrap();
            assert!(r500.threshold < r2000.threshold);
            for r in [&r500, &r2000] {
                assert!(r.predicted_arl >= r.target_arl);
                assert!(r.predicted_arl <= r.target_arl * (1.0 + 1e-5));
                assert_eq!(r.per_b_theta.as_ref().unwrap().len(), 49);
            }
        }
        let g = threshold_for_arl(500.0, 50, &m, ArlMethod::GaussianOrder).unwrap();
        let s = threshold_for_arl(500.0, 50, &m, ArlMethod::SkewnessCorrected).unwrap();
        assert!(m.third_moment_h0(2).unwrap() > 0.0);
        assert!(s.threshold >= g.threshold);
        assert!(threshold_for_arl(500.0, 50, &m, ArlMethod::MonteCarlo).is_err());
        assert!(threshold_for_arl(1.0, 50, &m, ArlMethod::GaussianOrder).is_err());
    }

    #[test]
    fn result_json() {
        let m = gaussianish();
        let r = threshold_for_arl(500.0, 20, &m, ArlMethod::SkewnessCorrected).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["method"], "skewness_corrected");
        let back: CalibrationResult = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn edd_prediction() {
        assert_eq!(edd_predict(4.0, 2.0, 0.5).unwrap(), 4.0);
        assert_eq!(edd_predict(8.0, 2.0, 0.5).unwrap(), 8.0);
        assert!(matches!(edd_predict(4.0, 2.0, 0.0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn window_recommendation() {
        let e = std::f64::consts::E;
        assert_eq!(recommend_window(3.0, 1.0, 1.0, 1.0, 40, 3.0 / e).unwrap(), 37);
        assert_eq!(recommend_window(3.0, 1.0, 1.0, 1.0, 40, 3.0 - 1e-12).unwrap(), 21);
        // while b/(ρD) >= N/4 both terms shrink as D grows
        let ws: Vec<usize> = [0.05, 0.1, 0.2, 0.4, 0.8]
            .iter()
            .map(|&d| recommend_window(3.0, 1.0, d, 1.0, 15, 1.0).unwrap())
            .collect();
        assert!(ws.windows(2).all(|p| p[1] <= p[0]), "{ws:?}");
        // below that the log term grows like 1/delay, so the window can widen
        let small = recommend_window(3.0, 1.0, 1.0, 1.0, 15, 1.0).unwrap();
        let large = recommend_window(3.0, 1.0, 3.0, 1.0, 15, 1.0).unwrap();
        assert!(large > small);
        assert!(recommend_window(3.0, 1.0, 0.0, 1.0, 15, 1.0).is_err());
        assert!(recommend_window(3.0, 1.0, 1.0, 1.0, 15, 3.0).is_err());
    }
}

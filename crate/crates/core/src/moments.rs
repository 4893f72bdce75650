//! Null-hypothesis moment constants of the block MMD statistic.
//!
//! With `h` the four-argument kernel combination and `X, X', .., Y, Y', ..`
//! i.i.d. pre-change draws:
//!
//! ```text
//! C1 = E[h(X,X',Y,Y')²]
//! C2 = Cov[h(X,X',Y,Y'), h(X'',X''',Y,Y')]
//! Var(D_B) = (B choose 2)⁻¹ (C1/N + (N-1)/N · C2)
//! rho      = ((C1 + (N-1)·C2) / (2N))^(-1/2)
//! ```
//!
//! The six third-order expectations are stored in the order of
//! [`ThirdTerm`] and feed the skewness of the normalized statistic.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{h_unchecked, KernelSpec};
use crate::rng::{derive_seed, stream_rng, tags};

/// Default number of Monte Carlo tuples per estimate.
pub const DEFAULT_DRAWS: usize = 100_000;

/// Minimum reference size: one draw uses nine distinct samples.
pub const MIN_REFERENCE: usize = 9;

/// Index into [`MomentEstimates::third_terms`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum ThirdTerm {
    /// `E[h(X,X',Y,Y') h(X',X'',Y',Y'') h(X'',X,Y'',Y)]`
    TriangleSameBlock = 0,
    /// `E[h(X,X',Y,Y') h(X',X'',Y',Y'') h(X''',X'''',Y'',Y)]`
    TriangleTwoBlocks = 1,
    /// `E[h(X,X',Y,Y') h(X'',X''',Y',Y'') h(X'''',X''''',Y'',Y)]`
    TriangleThreeBlocks = 2,
    /// `E[h(X,X',Y,Y')³]`
    Cube = 3,
    /// `E[h(X,X',Y,Y')² h(X'',X''',Y,Y')]`
    SquareCross = 4,
    /// `E[h(X,X',Y,Y') h(X'',X''',Y,Y') h(X'''',X''''',Y,Y')]`
    TripleCross = 5,
}

/// Pre-computable H0 constants that normalize every detection statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimates {
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    pub third_terms: [f64; 6],
    #[serde(rename = "N")]
    pub n_blocks: usize,
    pub rho: f64,
    pub n_samples_used: usize,
    pub seed: u64,
    /// Kernel the constants were computed with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSpec>,
}

/// Sums of the eight per-tuple products (C1, C2, then the six third terms).
type Products = [f64; 8];

fn tuple_products(spec: &KernelSpec, x: [&[f64]; 6], y: [&[f64]; 3]) -> Products {
    let h = |a: &[f64], b: &[f64], c: &[f64], d: &[f64]| h_unchecked(spec, a, b, c, d);
    let h0 = h(x[0], x[1], y[0], y[1]);
    let h_shared = h(x[2], x[3], y[0], y[1]);
    let h_shared2 = h(x[4], x[5], y[0], y[1]);
    let h_next = h(x[1], x[2], y[1], y[2]);
    let h_close_same = h(x[2], x[0], y[2], y[0]);
    let h_close_other = h(x[3], x[4], y[2], y[0]);
    let h_mid_other = h(x[2], x[3], y[1], y[2]);
    let h_close_third = h(x[4], x[5], y[2], y[0]);
    [
        h0 * h0,
        h0 * h_shared,
        h0 * h_next * h_close_same,
        h0 * h_next * h_close_other,
        h0 * h_mid_other * h_close_third,
        h0 * h0 * h0,
        h0 * h0 * h_shared,
        h0 * h_shared * h_shared2,
    ]
}

impl MomentEstimates {
    /// Assemble estimates from raw expectations, applying the ordering clamps
    /// `C2 >= 0` and `C1 >= max(C2, eps)`.
    pub fn from_raw(
        c1: f64,
        c2: f64,
        third_terms: [f64; 6],
        n_blocks: usize,
        n_samples_used: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::invalid("number of blocks N must be >= 1"));
        }
        if !(c1.is_finite() && c2.is_finite()) || c1 <= 1e-14 {
            return Err(Error::Degenerate("uninformative kernel/data: E[h^2] is zero".into()));
        }
        let c2 = c2.max(0.0);
        let c1 = c1.max(c2).max(f64::EPSILON);
        let rho = rho_from(c1, c2, n_blocks);
        Ok(Self {
            c1,
            c2,
            third_terms,
            n_blocks,
            rho,
            n_samples_used,
            seed,
            kernel: None,
        })
    }

    /// Same constants for a different block count.
    pub fn with_blocks(&self, n_blocks: usize) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::invalid("number of blocks N must be >= 1"));
        }
        Ok(Self {
            n_blocks,
            rho: rho_from(self.c1, self.c2, n_blocks),
            ..self.clone()
        })
    }

    pub fn third(&self, term: ThirdTerm) -> f64 {
        self.third_terms[term as usize]
    }

    /// Variance of the averaged block statistic at block size `b` under H0.
    pub fn var_h0(&self, b: usize) -> Result<f64> {
        if b < 2 {
            return Err(Error::invalid(format!("block size must be >= 2, got {b}")));
        }
        let n = self.n_blocks as f64;
        Ok((self.c1 / n + (n - 1.0) / n * self.c2) / choose2(b))
    }

    /// Covariance between the statistics at block sizes `b1` (time t) and
    /// `b2` (time t+s).
    pub fn cov_h0(&self, b1: usize, b2: usize, s: usize) -> Result<f64> {
        if b1 < 2 || b2 < 2 {
            return Err(Error::invalid("block sizes must be >= 2"));
        }
        let overlap = if b2 < s {
            0
        } else if b2 - s < b1 {
            b2 - s
        } else {
            b1
        };
        Ok(self.c2 * choose2(overlap) / (choose2(b1) * choose2(b2)))
    }

    /// Third moment of the un-normalized statistic under H0.
    pub fn third_raw_h0(&self, b: usize) -> Result<f64> {
        if b < 2 {
            return Err(Error::invalid(format!("block size must be >= 2, got {b}")));
        }
        let bf = b as f64;
        let n = self.n_blocks as f64;
        let denom = bf * bf * (bf - 1.0) * (bf - 1.0);
        let w1 = 1.0 / (n * n);
        let w2 = 3.0 * (n - 1.0) / (n * n);
        let w3 = (n - 1.0) * (n - 2.0) / (n * n);
        let t = &self.third_terms;
        let triangles = w1 * t[0] + w2 * t[1] + w3 * t[2];
        let shared = w1 * t[3] + w2 * t[4] + w3 * t[5];
        Ok(8.0 * (bf - 2.0) / denom * triangles + 4.0 / denom * shared)
    }

    /// Skewness `E[Z_B³]` of the normalized statistic under H0.
    pub fn third_moment_h0(&self, b: usize) -> Result<f64> {
        let var = self.var_h0(b)?;
        if var <= 0.0 {
            return Err(Error::Degenerate("H0 variance is zero".into()));
        }
        Ok(self.third_raw_h0(b)? / var.powf(1.5))
    }

    /// Exact constants when the pre-change law is uniform over `points`
    /// (draws with replacement). Cost is `O(M^6)`; intended for tiny supports.
    pub fn exhaustive_discrete(points: &[Vec<f64>], spec: &KernelSpec, n_blocks: usize) -> Result<Self> {
        let m = points.len();
        if m < 2 {
            return Err(Error::InsufficientData {
                what: "support points",
                needed: 2,
                available: m,
            });
        }
        let dim = points[0].len();
        for p in points {
            check_dim(dim, p.len())?;
        }
        let mut hv = vec![0.0; m * m * m * m];
        let idx = |a: usize, b: usize, c: usize, d: usize| ((a * m + b) * m + c) * m + d;
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    for d in 0..m {
                        hv[idx(a, b, c, d)] = h_unchecked(spec, &points[a], &points[b], &points[c], &points[d]);
                    }
                }
            }
        }
        // g(y0, y1) = E_{X,X'} h(X, X', y0, y1)
        let mut g = vec![0.0; m * m];
        for c in 0..m {
            for d in 0..m {
                let mut s = 0.0;
                for a in 0..m {
                    for b in 0..m {
                        s += hv[idx(a, b, c, d)];
                    }
                }
                g[c * m + d] = s / (m * m) as f64;
            }
        }
        let mf = m as f64;
        let (mut c1, mut c2, mut cube, mut sq_cross, mut triple) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for c in 0..m {
            for d in 0..m {
                let gv = g[c * m + d];
                c2 += gv * gv;
                triple += gv * gv * gv;
                for a in 0..m {
                    for b in 0..m {
                        let v = hv[idx(a, b, c, d)];
                        c1 += v * v;
                        cube += v * v * v;
                        sq_cross += v * v * gv;
                    }
                }
            }
        }
        let m4 = mf.powi(4);
        c1 /= m4;
        cube /= m4;
        sq_cross /= m4;
        c2 /= mf * mf;
        triple /= mf * mf;

        let (mut tri_same, mut tri_two, mut tri_three) = (0.0, 0.0, 0.0);
        for y0 in 0..m {
            for y1 in 0..m {
                for y2 in 0..m {
                    tri_three += g[y0 * m + y1] * g[y1 * m + y2] * g[y2 * m + y0];
                    let g20 = g[y2 * m + y0];
                    for x0 in 0..m {
                        for x1 in 0..m {
                            let first = hv[idx(x0, x1, y0, y1)];
                            for x2 in 0..m {
                                let second = first * hv[idx(x1, x2, y1, y2)];
                                tri_same += second * hv[idx(x2, x0, y2, y0)];
                                tri_two += second * g20;
                            }
                        }
                    }
                }
            }
        }
        tri_same /= mf.powi(6);
        tri_two /= mf.powi(6);
        tri_three /= mf.powi(3);

        let mut est = Self::from_raw(
            c1,
            c2,
            [tri_same, tri_two, tri_three, cube, sq_cross, triple],
            n_blocks,
            m,
            0,
        )?;
        est.kernel = Some(spec.clone());
        Ok(est)
    }
}

fn rho_from(c1: f64, c2: f64, n_blocks: usize) -> f64 {
    let n = n_blocks as f64;
    ((c1 + (n - 1.0) * c2) / (2.0 * n)).powf(-0.5)
}

/// `(k choose 2)`, zero for `k < 2`.
pub fn choose2(k: usize) -> f64 {
    if k < 2 {
        0.0
    } else {
        (k as f64) * (k as f64 - 1.0) / 2.0
    }
}

const CHUNK: usize = 1024;

/// Monte Carlo estimates of C1, C2 and the six third-order terms.
///
/// Each draw takes nine distinct reference indices uniformly without
/// replacement; draw `i` uses a generator derived from `(seed, i)`, so the
/// result is independent of thread count.
pub fn estimate_moments(
    reference: &[Vec<f64>],
    spec: &KernelSpec,
    n_blocks: usize,
    n_draws: usize,
    seed: u64,
) -> Result<MomentEstimates> {
    let m = reference.len();
    if m < MIN_REFERENCE {
        return Err(Error::InsufficientData {
            what: "reference samples for moment estimation",
            needed: MIN_REFERENCE,
            available: m,
        });
    }
    if n_blocks == 0 {
        return Err(Error::invalid("number of blocks N must be >= 1"));
    }
    if n_draws == 0 {
        return Err(Error::invalid("n_draws must be >= 1"));
    }
    let dim = reference[0].len();
    for r in reference {
        check_dim(dim, r.len())?;
    }
    let base = derive_seed(seed, tags::MOMENTS, 0);
    let n_chunks = n_draws.div_ceil(CHUNK);
    let partials: Vec<Products> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = [0.0; 8];
            let hi = ((c + 1) * CHUNK).min(n_draws);
            for draw in c * CHUNK..hi {
                let mut rng = stream_rng(base, draw as u64);
                let ids = index::sample(&mut rng, m, 9);
                let p = |k: usize| reference[ids.index(k)].as_slice();
                let prods = tuple_products(spec, [p(0), p(1), p(2), p(3), p(4), p(5)], [p(6), p(7), p(8)]);
                for (a, v) in acc.iter_mut().zip(prods) {
                    *a += v;
                }
            }
            acc
        })
        .collect();
    let mut total = [0.0; 8];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    let nd = n_draws as f64;
    let mean = total.map(|v| v / nd);
    let mut est = MomentEstimates::from_raw(
        mean[0],
        mean[1],
        [mean[2], mean[3], mean[4], mean[5], mean[6], mean[7]],
        n_blocks,
        m,
        seed,
    )?;
    est.kernel = Some(spec.clone());
    Ok(est)
}

/// Unbiased estimate of the squared population MMD between two equal-size samples.
pub fn mmd_population_estimate(sample_p: &[Vec<f64>], sample_q: &[Vec<f64>], spec: &KernelSpec) -> Result<f64> {
    let n = sample_p.len();
    if n != sample_q.len() {
        return Err(Error::invalid(format!(
            "sample sizes differ: {} vs {}",
            n,
            sample_q.len()
        )));
    }
    if n < 2 {
        return Err(Error::InsufficientData {
            what: "samples per side",
            needed: 2,
            available: n,
        });
    }
    let dim = sample_p[0].len();
    for v in sample_p.iter().chain(sample_q) {
        check_dim(dim, v.len())?;
    }
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in 0..n {
                if i != j {
                    s += h_unchecked(spec, &sample_p[i], &sample_p[j], &sample_q[i], &sample_q[j]);
                }
            }
            s
        })
        .collect();
    let nf = n as f64;
    Ok(rows.iter().sum::<f64>() / (nf * (nf - 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    fn fixed(c1: f64, c2: f64, n: usize) -> MomentEstimates {
        MomentEstimates::from_raw(c1, c2, [0.0; 6], n, 100, 0).unwrap()
    }

    #[test]
    fn rho_inverts_variance_constant() {
        let m = fixed(0.8, 0.3, 7);
        let n = 7.0;
        assert_relative_eq!(
            m.rho * m.rho * (m.c1 + (n - 1.0) * m.c2) / (2.0 * n),
            1.0,
            epsilon = 1e-12
        );
        let one = fixed(0.8, 0.3, 1);
        assert_relative_eq!(one.rho, (0.8f64 / 2.0).powf(-0.5), epsilon = 1e-12);
    }

    #[test]
    fn rho_increases_with_blocks() {
        let mut prev = 0.0;
        for n in [1, 2, 5, 15, 100, 10_000] {
            let m = fixed(1.0, 0.4, n);
            assert!(m.rho >= prev);
            prev = m.rho;
        }
        assert_relative_eq!(prev, (0.4f64 / 2.0).powf(-0.5), max_relative = 1e-4);
    }

    #[test]
    fn variance_examples() {
        let m = fixed(0.9, 0.2, 1);
        assert_relative_eq!(m.var_h0(2).unwrap(), 0.9, epsilon = 1e-15);
        let big = fixed(0.9, 0.2, 1_000_000);
        assert_relative_eq!(big.var_h0(10).unwrap(), 0.2 / 45.0, max_relative = 1e-5);
        assert!(m.var_h0(1).is_err());
        let m15 = fixed(0.9, 0.2, 15);
        for b in 2..60 {
            assert!(m15.var_h0(b + 1).unwrap() < m15.var_h0(b).unwrap());
        }
        assert!(fixed(0.9, 0.2, 16).var_h0(10).unwrap() < m15.var_h0(10).unwrap());
    }

    #[test]
    fn covariance_examples() {
        let m = fixed(0.9, 0.36, 4);
        assert_relative_eq!(m.cov_h0(6, 6, 0).unwrap(), 0.36 / 15.0, epsilon = 1e-15);
        assert_eq!(m.cov_h0(6, 6, 6).unwrap(), 0.0);
        assert_eq!(m.cov_h0(6, 4, 9).unwrap(), 0.0);
        assert_relative_eq!(m.cov_h0(3, 4, 2).unwrap(), 0.36 / 18.0, epsilon = 1e-15);
        let inf = fixed(0.9, 0.36, 10_000_000);
        assert_relative_eq!(m.cov_h0(8, 8, 0).unwrap(), inf.var_h0(8).unwrap(), max_relative = 1e-6);
    }

    #[test]
    fn third_moment_structure() {
        let zero = fixed(1.0, 0.5, 5);
        assert_eq!(zero.third_moment_h0(7).unwrap(), 0.0);
        // at B = 2 only the shared-pair brace survives with coefficient 1
        let mut m = fixed(1.0, 0.5, 3);
        m.third_terms = [11.0, 13.0, 17.0, 0.3, 0.2, 0.1];
        let n = 3.0f64;
        let expect = 0.3 / (n * n) + 3.0 * (n - 1.0) / (n * n) * 0.2 + (n - 1.0) * (n - 2.0) / (n * n) * 0.1;
        assert_relative_eq!(m.third_raw_h0(2).unwrap(), expect, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_kernel_rejected() {
        // identical points make h vanish
        let same = vec![vec![0.5, 0.5]; 20];
        let spec = KernelSpec::gaussian_rbf(1.0).unwrap();
        let err = estimate_moments(&same, &spec, 3, 500, 1).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
        assert!(estimate_moments(&gaussian(8, 2, 1), &spec, 3, 10, 1).is_err());
    }

    #[test]
    fn gaussian_reference_gap_is_positive() {
        let r = gaussian(3000, 1, 3);
        let bw = crate::kernel::median_heuristic(&r[..500]).unwrap();
        let spec = KernelSpec::gaussian_rbf(bw).unwrap();
        let m = estimate_moments(&r, &spec, 15, 100_000, 11).unwrap();
        assert!(m.c1 - m.c2 > 0.0);
        assert!(m.c1 >= m.c2 && m.c2 >= 0.0);
    }

    #[test]
    fn estimates_are_reproducible_and_permutation_stable() {
        let r = gaussian(400, 3, 5);
        let spec = KernelSpec::gaussian_rbf(2.0).unwrap();
        let a = estimate_moments(&r, &spec, 4, 40_000, 9).unwrap();
        let b = estimate_moments(&r, &spec, 4, 40_000, 9).unwrap();
        assert_eq!(a, b);
        let mut rev = r.clone();
        rev.reverse();
        let c = estimate_moments(&rev, &spec, 4, 40_000, 9).unwrap();
        assert_relative_eq!(a.c1, c.c1, max_relative = 0.05);
        assert_relative_eq!(a.c2, c.c2, max_relative = 0.1);
    }

    #[test]
    fn json_field_names() {
        let m = fixed(0.9, 0.2, 3);
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        for key in ["C1", "C2", "third_terms", "N", "rho", "n_samples_used", "seed"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: MomentEstimates = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn population_mmd() {
        let spec = KernelSpec::gaussian_rbf(1.0).unwrap();
        let p = gaussian(50, 2, 1);
        assert_eq!(mmd_population_estimate(&p, &p, &spec).unwrap(), 0.0);
        assert!(mmd_population_estimate(&p, &p[..10], &spec).is_err());
    }
}

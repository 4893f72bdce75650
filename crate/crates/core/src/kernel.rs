//! Kernel evaluation, bandwidth selection and Gram blocks.
//!
//! Everything that turns raw vectors into kernel values goes through
//! [`KernelSpec::eval`]. The Gaussian RBF used here is
//!
//! ```text
//! k(x, y) = exp(-‖x - y‖² / r²)
//! ```
//!
//! with bandwidth `r` and uniform bound `K = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    GaussianRbf,
}

/// Kernel family, bandwidth and the supremum `K` of the kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelSpec")]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
    pub bound: f64,
}

#[derive(Deserialize)]
struct RawKernelSpec {
    family: KernelFamily,
    bandwidth: f64,
    #[serde(default)]
    bound: Option<f64>,
}

impl TryFrom<RawKernelSpec> for KernelSpec {
    type Error = Error;

    fn try_from(raw: RawKernelSpec) -> Result<Self> {
        let spec = match raw.family {
            KernelFamily::GaussianRbf => KernelSpec::gaussian_rbf(raw.bandwidth)?,
        };
        if let Some(bound) = raw.bound {
            if (bound - spec.bound).abs() > 1e-12 {
                return Err(Error::invalid(format!("gaussian_rbf bound must be 1, got {bound}")));
            }
        }
        Ok(spec)
    }
}

impl KernelSpec {
    pub fn gaussian_rbf(bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::invalid(format!(
                "bandwidth must be finite and > 0, got {bandwidth}"
            )));
        }
        Ok(Self {
            family: KernelFamily::GaussianRbf,
            bandwidth,
            bound: 1.0,
        })
    }

    /// Kernel value without a dimension check. Callers guarantee `x.len() == y.len()`.
    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), y.len());
        match self.family {
            KernelFamily::GaussianRbf => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-sq / (self.bandwidth * self.bandwidth)).exp()
            }
        }
    }
}

/// `k(x1,x2) + k(y1,y2) - k(x1,y2) - k(x2,y1)` without dimension checks.
#[inline]
pub(crate) fn h_unchecked(spec: &KernelSpec, x1: &[f64], x2: &[f64], y1: &[f64], y2: &[f64]) -> f64 {
    spec.eval(x1, x2) + spec.eval(y1, y2) - spec.eval(x1, y2) - spec.eval(x2, y1)
}

/// Checked kernel evaluation.
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::invalid("vectors must have dimension >= 1"));
    }
    check_dim(x.len(), y.len())?;
    Ok(spec.eval(x, y))
}

fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Lower median of all nonzero pairwise Euclidean distances.
///
/// Zero distances (duplicate points) are dropped before taking the median.
pub fn median_heuristic(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData {
            what: "samples for the median heuristic",
            needed: 2,
            available: samples.len(),
        });
    }
    let dim = samples[0].len();
    for s in samples {
        check_dim(dim, s.len())?;
    }
    let mut dists = Vec::with_capacity(samples.len() * (samples.len() - 1) / 2);
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            let d = euclidean(a, b);
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::Degenerate(
            "all pairwise distances are zero; cannot choose a bandwidth".into(),
        ));
    }
    let mid = (dists.len() - 1) / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    Ok(*median)
}

/// Gram block `M[i][j] = k(a_i, b_j)`.
pub fn gram(spec: &KernelSpec, block_a: &[Vec<f64>], block_b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = block_a.first().or_else(|| block_b.first()).map(Vec::len).unwrap_or(0);
    for v in block_a.iter().chain(block_b) {
        check_dim(dim, v.len())?;
    }
    Ok(block_a
        .iter()
        .map(|a| block_b.iter().map(|b| spec.eval(a, b)).collect())
        .collect())
}

//! Comparison procedures: KCUSUM and Hotelling T².
//!
//! The fixed-block Scan-B comparator is the kernel detector with its scan
//! region collapsed to `{w}`; see [`scan_b_fixed`].

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::detector::{DetectorConfig, OnlineKernelCusum};
use crate::error::{check_dim, Error, Result};
use crate::kernel::{h_unchecked, KernelSpec};
use crate::rng::{derive_seed, stream_rng, tags};

/// Drift used by KCUSUM unless configured otherwise.
pub const KCUSUM_DEFAULT_DELTA: f64 = 1.0 / 50.0;

/// Scan-B with a single block size `B = w`.
pub fn scan_b_fixed(config: DetectorConfig, reference: &[Vec<f64>], seed: u64) -> Result<OnlineKernelCusum> {
    let w = config.w;
    OnlineKernelCusum::new(config.with_b_min(w), reference, seed)
}

/// Kernel CUSUM with paired linear-time MMD increments.
///
/// On even steps `s ← max(0, s + h(x1, x2, y_prev, y) − δ)` with two fresh
/// reference draws; on odd steps the observation is buffered and `s` holds.
#[derive(Clone, Debug)]
pub struct Kcusum {
    spec: KernelSpec,
    delta: f64,
    s: f64,
    t: u64,
    reference: Arc<Vec<Vec<f64>>>,
    order: Vec<usize>,
    next: usize,
    prev: Option<Vec<f64>>,
    dim: usize,
    /// Reshuffle and reuse the pool when it runs out instead of failing.
    recycle: Option<u64>,
    epoch: u64,
}

impl Kcusum {
    /// Reference points are consumed without replacement in a seeded random order.
    pub fn new(spec: KernelSpec, delta: f64, reference: Arc<Vec<Vec<f64>>>, seed: u64) -> Result<Self> {
        let mut order: Vec<usize> = (0..reference.len()).collect();
        order.shuffle(&mut stream_rng(derive_seed(seed, tags::REFERENCE, 0), 0));
        Self::with_order(spec, delta, reference, order)
    }

    /// Reference points are consumed in exactly the given order.
    pub fn with_order(spec: KernelSpec, delta: f64, reference: Arc<Vec<Vec<f64>>>, order: Vec<usize>) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::invalid(format!("KCUSUM drift must be > 0, got {delta}")));
        }
        if reference.len() < 2 {
            return Err(Error::InsufficientData {
                what: "reference samples for KCUSUM",
                needed: 2,
                available: reference.len(),
            });
        }
        if let Some(&bad) = order.iter().find(|&&i| i >= reference.len()) {
            return Err(Error::invalid(format!("reference index {bad} out of range")));
        }
        let dim = reference[0].len();
        for r in reference.iter() {
            check_dim(dim, r.len())?;
        }
        Ok(Self {
            spec,
            delta,
            s: 0.0,
            t: 0,
            reference,
            order,
            next: 0,
            prev: None,
            dim,
            recycle: None,
            epoch: 0,
        })
    }

    /// When the pool is exhausted, start a new pass over it in a fresh
    /// order derived from `seed` rather than returning an error.
    pub fn recycling(mut self, seed: u64) -> Self {
        self.recycle = Some(seed);
        self
    }

    pub fn statistic(&self) -> f64 {
        self.s
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&mut self, y: &[f64]) -> Result<f64> {
        check_dim(self.dim, y.len())?;
        self.t += 1;
        if self.t % 2 == 1 {
            self.prev = Some(y.to_vec());
            return Ok(self.s);
        }
        if self.next + 2 > self.order.len() {
            if let Some(seed) = self.recycle {
                self.epoch += 1;
                self.order
                    .shuffle(&mut stream_rng(derive_seed(seed, tags::REFERENCE, self.epoch), 0));
                self.next = 0;
            }
        }
        if self.next + 2 > self.order.len() {
            return Err(Error::InsufficientData {
                what: "reference samples for KCUSUM (pool exhausted)",
                needed: self.next + 2,
                available: self.order.len(),
            });
        }
        let x1 = &self.reference[self.order[self.next]];
        let x2 = &self.reference[self.order[self.next + 1]];
        self.next += 2;
        let prev = self.prev.take().expect("odd step buffers an observation");
        let h = h_unchecked(&self.spec, x1, x2, &prev, y);
        self.s = (self.s + h - self.delta).max(0.0);
        Ok(self.s)
    }
}

/// Sufficient statistics of the reference sample, shared across trials.
#[derive(Clone, Debug)]
pub struct HotellingReference {
    m: usize,
    dim: usize,
    /// Reference mean; every vector is centered on it before accumulation.
    center: DVector<f64>,
    /// `Σ (x − center)`, zero up to rounding.
    sum: DVector<f64>,
    /// `Σ (x − center)(x − center)ᵀ`.
    scatter: DMatrix<f64>,
}

impl HotellingReference {
    pub fn new(reference: &[Vec<f64>]) -> Result<Self> {
        let m = reference.len();
        if m < 1 {
            return Err(Error::InsufficientData {
                what: "reference samples for Hotelling T²",
                needed: 1,
                available: 0,
            });
        }
        let dim = reference[0].len();
        let mut center = DVector::zeros(dim);
        for r in reference {
            check_dim(dim, r.len())?;
            center += DVector::from_column_slice(r);
        }
        center /= m as f64;
        let mut sum = DVector::zeros(dim);
        let mut scatter = DMatrix::zeros(dim, dim);
        for r in reference {
            let v = DVector::from_column_slice(r) - &center;
            scatter.ger(1.0, &v, &v, 1.0);
            sum += v;
        }
        Ok(Self {
            m,
            dim,
            center,
            sum,
            scatter,
        })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }
}

/// Two-sample Hotelling T² maximized over the split point.
///
/// At time `t` the split `κ ∈ [1, t−1]` compares `U = (X_1..X_M, Y_1..Y_{κ−1})`
/// with `V = (Y_κ..Y_t)`:
///
/// ```text
/// T²(κ) = (|U|·|V| / (M+t)) · (ū − v̄)ᵀ Σ̂⁻¹ (ū − v̄)
/// ```
///
/// with `Σ̂` the pooled within-sample covariance. Writing `W` for the total
/// scatter of all `M+t` points, `c = |U||V|/(M+t)` and `q = δᵀW⁻¹δ`, the
/// within scatter is `W − cδδᵀ` and Sherman-Morrison gives
/// `T² = c·(M+t−2)·q / (1 − c·q)`, so one Cholesky factor serves every `κ`.
#[derive(Clone, Debug)]
pub struct Hotelling {
    reference: Arc<HotellingReference>,
    /// Largest `|V|` considered; `None` scans every split.
    max_recent: Option<usize>,
    /// Centered observations, newest last. Only the last `max_recent` are kept.
    recent: VecDeque<DVector<f64>>,
    total_sum: DVector<f64>,
    total_scatter: DMatrix<f64>,
    t: u64,
    statistic: f64,
}

impl Hotelling {
    pub fn new(reference: Arc<HotellingReference>, max_recent: Option<usize>) -> Result<Self> {
        if let Some(c) = max_recent {
            if c < 2 {
                return Err(Error::invalid(format!("Hotelling split cap must be >= 2, got {c}")));
            }
        }
        Ok(Self {
            total_sum: reference.sum.clone(),
            total_scatter: reference.scatter.clone(),
            reference,
            max_recent,
            recent: VecDeque::new(),
            t: 0,
            statistic: f64::NEG_INFINITY,
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn statistic(&self) -> f64 {
        self.statistic
    }

    pub fn dim(&self) -> usize {
        self.reference.dim
    }

    /// `T²(κ)` for every split in scan order (newest `V` first), as `(|V|, T²)`.
    pub fn split_statistics(&self) -> Result<Vec<(usize, f64)>> {
        let n_total = self.reference.m as f64 + self.t as f64;
        if self.t < 2 || n_total < 3.0 {
            return Ok(Vec::new());
        }
        let mean = &self.total_sum / n_total;
        let mut w = &self.total_scatter - n_total * &mean * mean.transpose();
        w = 0.5 * (&w + w.transpose());
        let max_v = self.recent.len().min(self.t as usize);
        match self.splits(&w, n_total, max_v)? {
            Some(v) => Ok(v),
            None => {
                let d = self.reference.dim as f64;
                let lambda = (1e-8 * w.trace() / d).max(f64::MIN_POSITIVE);
                let reg = &w + DMatrix::identity(w.nrows(), w.ncols()) * lambda;
                self.splits(&reg, n_total, max_v)?
                    .ok_or_else(|| Error::Degenerate("pooled covariance is singular even after regularization".into()))
            }
        }
    }

    /// `None` when `w` (or some within scatter) is not positive definite.
    ///
    /// With `L` the Cholesky factor of `w`, `L⁻¹δ` for the split with `V`
    /// summing to `v` is `L⁻¹S/|U| − L⁻¹v·n/(|U||V|)`, so a single
    /// triangular solve over all recent vectors plus running sums covers
    /// every split.
    fn splits(&self, w: &DMatrix<f64>, n_total: f64, max_v: usize) -> Result<Option<Vec<(usize, f64)>>> {
        let chol = match w.clone().cholesky() {
            Some(c) => c,
            None => return Ok(None),
        };
        let l = chol.l();
        let dim = self.reference.dim;
        let mut ys = DMatrix::zeros(dim, max_v);
        for (j, y) in self.recent.iter().rev().take(max_v).enumerate() {
            ys.set_column(j, y);
        }
        let mut s = self.total_sum.clone();
        if !(l.solve_lower_triangular_mut(&mut ys) && l.solve_lower_triangular_mut(&mut s)) {
            return Ok(None);
        }
        let mut out = Vec::with_capacity(max_v.saturating_sub(1));
        let mut v = DVector::zeros(dim);
        for (k, col) in ys.column_iter().enumerate() {
            v += col;
            if k == 0 {
                continue;
            }
            let n_v = (k + 1) as f64;
            let n_u = n_total - n_v;
            let (a, b) = (1.0 / n_u, n_total / (n_u * n_v));
            let q: f64 = s.iter().zip(v.iter()).map(|(si, vi)| (a * si - b * vi).powi(2)).sum();
            let c = n_u * n_v / n_total;
            let denom = 1.0 - c * q;
            if !(denom > 1e-12) {
                return Ok(None);
            }
            out.push((k + 1, c * (n_total - 2.0) * q / denom));
        }
        Ok(Some(out))
    }

    pub fn step(&mut self, y: &[f64]) -> Result<f64> {
        check_dim(self.reference.dim, y.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("observation contains a non-finite value"));
        }
        let v = DVector::from_column_slice(y) - &self.reference.center;
        self.total_scatter.ger(1.0, &v, &v, 1.0);
        self.total_sum += &v;
        self.recent.push_back(v);
        if let Some(cap) = self.max_recent {
            while self.recent.len() > cap {
                self.recent.pop_front();
            }
        }
        self.t += 1;
        self.statistic = self
            .split_statistics()?
            .into_iter()
            .map(|(_, t2)| t2)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(self.statistic)
    }
}

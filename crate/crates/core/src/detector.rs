//! Streaming online kernel CUSUM.
//!
//! The detector keeps `N` fixed reference blocks of length `w` and a ring of
//! the `w` most recent observations. Block sizes are indexed by offset from
//! the newest observation: offset `e` pairs reference element `X^(n)[e]` with
//! the observation `e` steps back, so the size-`B` statistic uses offsets
//! `0..B`. For every `B` in the scan region
//!
//! ```text
//! Z_B(t) = (1/N) Σ_n D(X_B^(n), Y_B(t)) / sqrt(Var_H0(B))
//! ```
//!
//! and the detector alarms the first time `max_B Z_B(t) >= b`.
//!
//! Per step only the new Gram row/column is evaluated (`O(N·w)` kernel
//! calls). The ring is addressed by rotation, so cached entries never move.
//! Only the block sum of the `N` cross Gram matrices enters the statistic, so
//! that sum is what gets cached. The scan rebuilds all suffix sums from
//! cached entries each step, which is `O(w²)` arithmetic.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{h_unchecked, KernelSpec};
use crate::moments::MomentEstimates;
use crate::rng::{derive_seed, stream_rng, tags};

/// Kernel combination `k(x1,x2) + k(y1,y2) - k(x1,y2) - k(x2,y1)`.
pub fn h_statistic(spec: &KernelSpec, x1: &[f64], x2: &[f64], y1: &[f64], y2: &[f64]) -> Result<f64> {
    let d = x1.len();
    for v in [x2, y1, y2] {
        check_dim(d, v.len())?;
    }
    Ok(h_unchecked(spec, x1, x2, y1, y2))
}

/// Unbiased block MMD: `(1/(B(B-1))) Σ_{i≠j} h(X_i, X_j, Y_i, Y_j)`.
pub fn mmd_unbiased(spec: &KernelSpec, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let b = x.len();
    if b != y.len() {
        return Err(Error::invalid(format!("block sizes differ: {} vs {}", b, y.len())));
    }
    if b < 2 {
        return Err(Error::invalid(format!("block size must be >= 2, got {b}")));
    }
    let d = x[0].len();
    for v in x.iter().chain(y) {
        check_dim(d, v.len())?;
    }
    let mut s = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                s += h_unchecked(spec, &x[i], &x[j], &y[i], &y[j]);
            }
        }
    }
    Ok(s / (b as f64 * (b as f64 - 1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Window length: largest block size scanned.
    pub w: usize,
    /// Number of reference blocks.
    #[serde(rename = "N")]
    pub n_blocks: usize,
    pub kernel: KernelSpec,
    #[serde(with = "crate::float_serde")]
    pub threshold: f64,
    pub moments: MomentEstimates,
    /// Smallest block size scanned.
    #[serde(default = "default_b_min")]
    pub b_min: usize,
}

fn default_b_min() -> usize {
    2
}

impl DetectorConfig {
    pub fn new(w: usize, kernel: KernelSpec, threshold: f64, moments: MomentEstimates) -> Self {
        Self {
            w,
            n_blocks: moments.n_blocks,
            kernel,
            threshold,
            moments,
            b_min: 2,
        }
    }

    pub fn with_b_min(mut self, b_min: usize) -> Self {
        self.b_min = b_min;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.w < 2 {
            return Err(Error::invalid(format!("window length w must be >= 2, got {}", self.w)));
        }
        if self.n_blocks < 1 {
            return Err(Error::invalid("number of blocks N must be >= 1"));
        }
        if self.b_min < 2 || self.b_min > self.w {
            return Err(Error::invalid(format!(
                "b_min must lie in [2, w={}], got {}",
                self.w, self.b_min
            )));
        }
        if self.moments.n_blocks != self.n_blocks {
            return Err(Error::invalid(format!(
                "moments were computed for N={}, detector uses N={}",
                self.moments.n_blocks, self.n_blocks
            )));
        }
        if self.threshold.is_nan() {
            return Err(Error::invalid("threshold is NaN"));
        }
        Ok(())
    }

    /// `1 / (N · B(B-1) · sqrt(Var_H0(B)))` for every `B` in `0..=max_b`.
    pub(crate) fn scale_table(&self, max_b: usize) -> Result<Vec<f64>> {
        let n = self.n_blocks as f64;
        let mut out = vec![0.0; max_b + 1];
        for (b, slot) in out.iter_mut().enumerate().skip(2) {
            let var = self.moments.var_h0(b)?;
            if var <= 0.0 {
                return Err(Error::Degenerate("H0 variance is zero".into()));
            }
            let bf = b as f64;
            *slot = 1.0 / (n * bf * (bf - 1.0) * var.sqrt());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub t: u64,
    /// `max_B Z_B(t)`; `-inf` while no block size is computable.
    #[serde(with = "crate::float_serde")]
    pub statistic: f64,
    /// Maximizing block size, or 0 during warm-up.
    pub argmax_b: usize,
    pub alarm: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_b: Option<Vec<(usize, f64)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingReport {
    /// Number of observations consumed when the alarm fired.
    pub stopped_at: Option<u64>,
    #[serde(with = "crate::float_serde")]
    pub statistic_at_stop: f64,
    pub argmax_b: usize,
    #[serde(with = "crate::float_serde")]
    pub threshold: f64,
    pub horizon: u64,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Serializable detector state. Gram caches are rebuilt on restore.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSnapshot {
    pub config: DetectorConfig,
    /// `ref_blocks[n][e]` pairs with the observation `e` steps back.
    pub ref_blocks: Vec<Vec<Vec<f64>>>,
    /// Ring contents, oldest first.
    pub ring: Vec<Vec<f64>>,
    pub t: u64,
    pub seed: Option<u64>,
}

/// Draw `N` blocks of `block_len` reference points without replacement,
/// returning offset-ordered blocks plus the unused remainder of the shuffle.
pub(crate) fn draw_blocks(
    reference: &[Vec<f64>],
    n_blocks: usize,
    block_len: usize,
    seed: u64,
) -> (Vec<Vec<Vec<f64>>>, Vec<usize>) {
    let mut order: Vec<usize> = (0..reference.len()).collect();
    let mut rng = stream_rng(derive_seed(seed, tags::BLOCKS, 0), 0);
    order.shuffle(&mut rng);
    let blocks = (0..n_blocks)
        .map(|n| {
            order[n * block_len..(n + 1) * block_len]
                .iter()
                .map(|&i| reference[i].clone())
                .collect()
        })
        .collect();
    let rest = order[n_blocks * block_len..].to_vec();
    (blocks, rest)
}

/// `Σ_n Σ_{e1≠e2 < B} k(X^n[e1], X^n[e2])` for `B` in `0..=w`.
fn xx_suffix(spec: &KernelSpec, blocks: &[Vec<Vec<f64>>], w: usize) -> Vec<f64> {
    let mut out = vec![0.0; w + 1];
    for b in 2..=w {
        let e = b - 1;
        let added: f64 = blocks
            .iter()
            .map(|block| (0..e).map(|e2| spec.eval(&block[e], &block[e2])).sum::<f64>())
            .sum();
        out[b] = out[b - 1] + 2.0 * added;
    }
    out
}

/// Window-limited online kernel CUSUM detector.
#[derive(Clone, Debug)]
pub struct OnlineKernelCusum {
    config: DetectorConfig,
    dim: usize,
    w: usize,
    n: usize,
    /// `x[(n * w + e) * dim ..]` is reference element `e` of block `n`.
    x: Vec<f64>,
    /// `Σ_n Σ_{e1≠e2 < B} k(X^n[e1], X^n[e2])` for every `B`.
    xx_suffix: Vec<f64>,
    /// `cross[e * w + slot] = Σ_n k(X^n[e], y_slot)`.
    cross: Vec<f64>,
    /// `g_yy[s1 * w + s2] = k(y_s1, y_s2)`.
    g_yy: Vec<f64>,
    ring: Vec<f64>,
    head: usize,
    len: usize,
    t: u64,
    scale: Vec<f64>,
    seed: Option<u64>,
    scratch: Vec<f64>,
    last_argmax: usize,
}

impl OnlineKernelCusum {
    /// Build a detector whose `N` reference blocks are drawn without
    /// replacement (seeded) from `reference`.
    pub fn new(config: DetectorConfig, reference: &[Vec<f64>], seed: u64) -> Result<Self> {
        config.validate()?;
        let needed = config.n_blocks * config.w;
        if reference.len() < needed {
            return Err(Error::InsufficientData {
                what: "reference samples (N*w)",
                needed,
                available: reference.len(),
            });
        }
        let dim = reference[0].len();
        if dim == 0 {
            return Err(Error::invalid("observations must have dimension >= 1"));
        }
        for r in reference {
            check_dim(dim, r.len())?;
        }
        let (blocks, _) = draw_blocks(reference, config.n_blocks, config.w, seed);
        let mut det = Self::from_blocks(config, blocks)?;
        det.seed = Some(seed);
        Ok(det)
    }

    /// Build a detector from explicit offset-ordered reference blocks.
    pub fn from_blocks(config: DetectorConfig, blocks: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        config.validate()?;
        let (w, n) = (config.w, config.n_blocks);
        if blocks.len() != n || blocks.iter().any(|b| b.len() != w) {
            return Err(Error::invalid(format!("expected {n} reference blocks of length {w}")));
        }
        let dim = blocks[0][0].len();
        let mut x = Vec::with_capacity(n * w * dim);
        for block in &blocks {
            for v in block {
                check_dim(dim, v.len())?;
                x.extend_from_slice(v);
            }
        }
        let xx_suffix = xx_suffix(&config.kernel, &blocks, w);
        let scale = config.scale_table(w)?;
        Ok(Self {
            dim,
            w,
            n,
            x,
            xx_suffix,
            cross: vec![0.0; w * w],
            g_yy: vec![0.0; w * w],
            ring: vec![0.0; w * dim],
            head: 0,
            len: 0,
            t: 0,
            scale,
            seed: None,
            scratch: vec![0.0; w + 1],
            last_argmax: 0,
            config,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Observations consumed so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn threshold(&self) -> f64 {
        self.config.threshold
    }

    /// Maximizing block size at the latest step, 0 during warm-up.
    pub fn last_argmax(&self) -> usize {
        self.last_argmax
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.config.threshold = threshold;
    }

    /// Reference block `n`, offset-ordered.
    pub fn ref_block(&self, n: usize) -> Vec<Vec<f64>> {
        (0..self.w).map(|e| self.x_at(n, e).to_vec()).collect()
    }

    /// Ring contents, oldest first.
    pub fn window(&self) -> Vec<Vec<f64>> {
        (0..self.len).rev().map(|e| self.y_at(e).to_vec()).collect()
    }

    #[inline]
    fn x_at(&self, n: usize, e: usize) -> &[f64] {
        let start = (n * self.w + e) * self.dim;
        &self.x[start..start + self.dim]
    }

    #[inline]
    fn slot_of(&self, e: usize) -> usize {
        (self.head + self.w - e) % self.w
    }

    #[inline]
    fn y_at(&self, e: usize) -> &[f64] {
        let s = self.slot_of(e) * self.dim;
        &self.ring[s..s + self.dim]
    }

    /// `Σ_n k(X^n[e], y)`, always summed in block order.
    #[inline]
    fn cross_entry(&self, e: usize, y: &[f64]) -> f64 {
        let spec = &self.config.kernel;
        (0..self.n).map(|nb| spec.eval(self.x_at(nb, e), y)).sum()
    }

    fn push(&mut self, y: &[f64]) {
        let w = self.w;
        let slot = if self.len == 0 { 0 } else { (self.head + 1) % w };
        self.ring[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(y);
        self.head = slot;
        self.len = (self.len + 1).min(w);
        self.t += 1;
        let spec = &self.config.kernel;

        for e in 0..self.len {
            let s = self.slot_of(e);
            let v = spec.eval(y, &self.ring[s * self.dim..(s + 1) * self.dim]);
            self.g_yy[slot * w + s] = v;
            self.g_yy[s * w + slot] = v;
        }
        for e in 0..w {
            self.cross[e * w + slot] = self.cross_entry(e, y);
        }
    }

    /// Fill `scratch[B]` with the block-summed numerator `Σ_n B(B-1) D_n` for `B` in `2..=len`.
    fn numerators(&mut self) {
        let w = self.w;
        let nf = self.n as f64;
        let (mut yy, mut xy) = (0.0, 0.0);
        for e in 1..self.len {
            let se = self.slot_of(e);
            let (mut add_yy, mut add_xy) = (0.0, 0.0);
            for e2 in 0..e {
                let s2 = self.slot_of(e2);
                add_yy += self.g_yy[se * w + s2];
                add_xy += self.cross[e * w + s2] + self.cross[e2 * w + se];
            }
            yy += 2.0 * add_yy;
            xy += add_xy;
            let b = e + 1;
            self.scratch[b] = self.xx_suffix[b] + nf * yy - 2.0 * xy;
        }
    }

    fn evaluate(&mut self, keep_profile: bool) -> StepResult {
        let b_min = self.config.b_min;
        let top = self.len;
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        let mut profile = keep_profile.then(Vec::new);
        if top >= b_min {
            self.numerators();
            for b in b_min..=top {
                let z = self.scratch[b] * self.scale[b];
                if z > best {
                    best = z;
                    arg = b;
                }
                if let Some(p) = profile.as_mut() {
                    p.push((b, z));
                }
            }
        }
        let computable = arg != 0;
        self.last_argmax = arg;
        StepResult {
            t: self.t,
            statistic: best,
            argmax_b: arg,
            alarm: computable && best >= self.config.threshold,
            per_b: profile,
        }
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        check_dim(self.dim, y.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("observation contains a non-finite value"));
        }
        Ok(())
    }

    /// Consume one observation.
    pub fn step(&mut self, y: &[f64]) -> Result<StepResult> {
        self.check(y)?;
        self.push(y);
        Ok(self.evaluate(false))
    }

    /// Like [`step`](Self::step) but also returns every `(B, Z_B(t))`.
    pub fn step_profile(&mut self, y: &[f64]) -> Result<StepResult> {
        self.check(y)?;
        self.push(y);
        Ok(self.evaluate(true))
    }

    /// Consume observations until an alarm or until `horizon` observations.
    pub fn run_to_alarm<I>(&mut self, stream: I, horizon: u64) -> Result<StoppingReport>
    where
        I: IntoIterator,
        I::Item: AsRef<[f64]>,
    {
        if horizon == 0 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        let mut last = StepResult {
            t: self.t,
            statistic: f64::NEG_INFINITY,
            argmax_b: 0,
            alarm: false,
            per_b: None,
        };
        let mut consumed = 0u64;
        for y in stream.into_iter() {
            if consumed >= horizon {
                break;
            }
            last = self.step(y.as_ref())?;
            consumed += 1;
            if last.alarm {
                return Ok(StoppingReport {
                    stopped_at: Some(consumed),
                    statistic_at_stop: last.statistic,
                    argmax_b: last.argmax_b,
                    threshold: self.config.threshold,
                    horizon,
                    seed: self.seed,
                });
            }
        }
        Ok(StoppingReport {
            stopped_at: None,
            statistic_at_stop: last.statistic,
            argmax_b: last.argmax_b,
            threshold: self.config.threshold,
            horizon,
            seed: self.seed,
        })
    }

    /// Largest absolute difference between any cached Gram entry and a fresh
    /// kernel evaluation of the raw vectors.
    pub fn cache_deviation(&self) -> f64 {
        let spec = &self.config.kernel;
        let w = self.w;
        let blocks: Vec<Vec<Vec<f64>>> = (0..self.n).map(|nb| self.ref_block(nb)).collect();
        let mut worst: f64 = 0.0;
        for (a, b) in xx_suffix(spec, &blocks, w).iter().zip(&self.xx_suffix) {
            worst = worst.max((a - b).abs());
        }
        for e1 in 0..self.len {
            let s1 = self.slot_of(e1);
            for e2 in 0..self.len {
                let s2 = self.slot_of(e2);
                let v = spec.eval(self.y_at(e1), self.y_at(e2));
                worst = worst.max((v - self.g_yy[s1 * w + s2]).abs());
            }
            for e in 0..w {
                let v = self.cross_entry(e, self.y_at(e1));
                worst = worst.max((v - self.cross[e * w + s1]).abs());
            }
        }
        worst
    }

    pub fn snapshot(&self) -> DetectorSnapshot {
        DetectorSnapshot {
            config: self.config.clone(),
            ref_blocks: (0..self.n).map(|nb| self.ref_block(nb)).collect(),
            ring: self.window(),
            t: self.t,
            seed: self.seed,
        }
    }

    pub fn restore(snapshot: DetectorSnapshot) -> Result<Self> {
        let mut det = Self::from_blocks(snapshot.config, snapshot.ref_blocks)?;
        if snapshot.ring.len() > det.w {
            return Err(Error::invalid("snapshot ring is longer than the window"));
        }
        if (snapshot.t as usize) < snapshot.ring.len() {
            return Err(Error::invalid("snapshot t is smaller than the ring length"));
        }
        for y in &snapshot.ring {
            det.check(y)?;
            det.push(y);
        }
        det.t = snapshot.t;
        det.seed = snapshot.seed;
        Ok(det)
    }
}

/// Unbounded-window variant scanning `B ∈ [b_min, t]`.
///
/// Reference blocks grow by one element per block whenever `t` exceeds the
/// current depth; the first `N·w` draws coincide with those of
/// [`OnlineKernelCusum::new`] for the same seed, so both agree for `t <= w`.
#[derive(Clone, Debug)]
pub struct OracleKernelCusum {
    config: DetectorConfig,
    dim: usize,
    reference: Vec<Vec<f64>>,
    pool: Vec<usize>,
    next_pool: usize,
    /// `blocks[n][e]`
    blocks: Vec<Vec<Vec<f64>>>,
    xx_suffix: Vec<f64>,
    ys: Vec<Vec<f64>>,
    /// `yy[j][i] = k(y_j, y_i)` for `i < j`.
    yy: Vec<Vec<f64>>,
    /// `cross[j][e] = Σ_n k(X^n[e], y_j)`.
    cross: Vec<Vec<f64>>,
    scale: Vec<f64>,
}

impl OracleKernelCusum {
    pub fn new(config: DetectorConfig, reference: &[Vec<f64>], seed: u64) -> Result<Self> {
        config.validate()?;
        let needed = config.n_blocks * config.w;
        if reference.len() < needed {
            return Err(Error::InsufficientData {
                what: "reference samples (N*w)",
                needed,
                available: reference.len(),
            });
        }
        let dim = reference[0].len();
        for r in reference {
            check_dim(dim, r.len())?;
        }
        let (blocks, rest) = draw_blocks(reference, config.n_blocks, config.w, seed);
        let mut det = Self {
            dim,
            reference: reference.to_vec(),
            pool: rest,
            next_pool: 0,
            blocks: vec![Vec::new(); config.n_blocks],
            xx_suffix: vec![0.0, 0.0],
            ys: Vec::new(),
            yy: Vec::new(),
            cross: Vec::new(),
            scale: vec![0.0, 0.0],
            config,
        };
        let w = det.config.w;
        for e in 0..w {
            let layer: Vec<Vec<f64>> = blocks.iter().map(|b| b[e].clone()).collect();
            det.add_layer(layer)?;
        }
        Ok(det)
    }

    fn depth(&self) -> usize {
        self.blocks[0].len()
    }

    fn add_layer(&mut self, layer: Vec<Vec<f64>>) -> Result<()> {
        let spec = &self.config.kernel;
        let e = self.depth();
        let mut added = 0.0;
        for (block, x_new) in self.blocks.iter().zip(&layer) {
            for x_old in block {
                added += spec.eval(x_new, x_old);
            }
        }
        if e >= 1 {
            let prev = self.xx_suffix[e];
            self.xx_suffix.push(prev + 2.0 * added);
        }
        for (j, y) in self.ys.iter().enumerate() {
            let s: f64 = layer.iter().map(|x| spec.eval(x, y)).sum();
            self.cross[j].push(s);
        }
        for (block, x_new) in self.blocks.iter_mut().zip(layer) {
            block.push(x_new);
        }
        let b = e + 1;
        if b >= 2 {
            let var = self.config.moments.var_h0(b)?;
            let bf = b as f64;
            self.scale
                .push(1.0 / (self.config.n_blocks as f64 * bf * (bf - 1.0) * var.sqrt()));
        }
        Ok(())
    }

    fn grow(&mut self) -> Result<()> {
        let n = self.config.n_blocks;
        if self.next_pool + n > self.pool.len() {
            return Err(Error::InsufficientData {
                what: "reference samples for the unbounded scan",
                needed: self.reference.len() + n,
                available: self.reference.len(),
            });
        }
        let layer = (0..n)
            .map(|k| self.reference[self.pool[self.next_pool + k]].clone())
            .collect();
        self.next_pool += n;
        self.add_layer(layer)
    }

    pub fn step(&mut self, y: &[f64]) -> Result<StepResult> {
        self.step_inner(y, false)
    }

    pub fn step_profile(&mut self, y: &[f64]) -> Result<StepResult> {
        self.step_inner(y, true)
    }

    fn step_inner(&mut self, y: &[f64], keep_profile: bool) -> Result<StepResult> {
        check_dim(self.dim, y.len())?;
        let t = self.ys.len() + 1;
        while self.depth() < t {
            self.grow()?;
        }
        let spec = self.config.kernel.clone();
        let row: Vec<f64> = self.ys.iter().map(|v| spec.eval(y, v)).collect();
        let col: Vec<f64> = (0..self.depth())
            .map(|e| self.blocks.iter().map(|b| spec.eval(&b[e], y)).sum())
            .collect();
        self.ys.push(y.to_vec());
        self.yy.push(row);
        self.cross.push(col);

        let nf = self.config.n_blocks as f64;
        let b_min = self.config.b_min;
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        let mut profile = keep_profile.then(Vec::new);
        let (mut yy, mut xy) = (0.0, 0.0);
        let newest = t - 1;
        for e in 1..t {
            let je = newest - e;
            let (mut add_yy, mut add_xy) = (0.0, 0.0);
            for e2 in 0..e {
                let j2 = newest - e2;
                add_yy += self.yy[j2][je];
                add_xy += self.cross[j2][e] + self.cross[je][e2];
            }
            yy += 2.0 * add_yy;
            xy += add_xy;
            let b = e + 1;
            if b >= b_min {
                let z = (self.xx_suffix[b] + nf * yy - 2.0 * xy) * self.scale[b];
                if z > best {
                    best = z;
                    arg = b;
                }
                if let Some(p) = profile.as_mut() {
                    p.push((b, z));
                }
            }
        }
        Ok(StepResult {
            t: t as u64,
            statistic: best,
            argmax_b: arg,
            alarm: arg != 0 && best >= self.config.threshold,
            per_b: profile,
        })
    }
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

    fn moments(n: usize) -> MomentEstimates {
        MomentEstimates::from_raw(0.5, 0.2, [0.0; 6], n, 100, 0).unwrap()
    }

    fn config(w: usize, n: usize, threshold: f64) -> DetectorConfig {
        DetectorConfig::new(w, KernelSpec::gaussian_rbf(1.5).unwrap(), threshold, moments(n))
    }

    /// Z_B(t) recomputed from the raw window with the naive estimator.
    fn from_scratch(det: &OnlineKernelCusum, b: usize) -> f64 {
        let window = det.window();
        let y: Vec<Vec<f64>> = window[window.len() - b..].to_vec();
        let cfg = det.config();
        let mut sum = 0.0;
        for nb in 0..cfg.n_blocks {
            let block = det.ref_block(nb);
            // offsets b-1..0 align with the oldest..newest of y
            let x: Vec<Vec<f64>> = (0..b).rev().map(|e| block[e].clone()).collect();
            sum += mmd_unbiased(&cfg.kernel, &x, &y).unwrap();
        }
        sum / cfg.n_blocks as f64 / cfg.moments.var_h0(b).unwrap().sqrt()
    }

    #[test]
    fn h_examples() {
        let s = KernelSpec::gaussian_rbf(1.0).unwrap();
        let (a, b) = ([0.3, 1.0], [2.0, -1.0]);
        assert_eq!(h_statistic(&s, &a, &b, &a, &b).unwrap(), 0.0);
        let v = h_statistic(&s, &[0.0], &[0.0], &[1.0], &[1.0]).unwrap();
        assert_relative_eq!(v, 2.0 - 2.0 * (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(v, 1.264_241_117_657_115_4, epsilon = 1e-12);
        assert!(h_statistic(&s, &[0.0], &[0.0, 1.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn mmd_examples() {
        let s = KernelSpec::gaussian_rbf(1.0).unwrap();
        let x = gaussian(5, 2, 1);
        assert_eq!(mmd_unbiased(&s, &x, &x).unwrap(), 0.0);
        let y = gaussian(2, 2, 2);
        let two = mmd_unbiased(&s, &x[..2], &y).unwrap();
        assert_relative_eq!(
            two,
            h_statistic(&s, &x[0], &x[1], &y[0], &y[1]).unwrap(),
            epsilon = 1e-14
        );
        assert!(mmd_unbiased(&s, &x[..1], &y[..1]).is_err());
        assert!(mmd_unbiased(&s, &x[..3], &y).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(config(1, 2, 1.0).validate().is_err());
        assert!(config(5, 2, 1.0).with_b_min(6).validate().is_err());
        assert!(config(5, 2, 1.0).with_b_min(1).validate().is_err());
        let mut c = config(5, 2, 1.0);
        c.n_blocks = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_uses_reference_exactly_once_when_tight() {
        let reference = gaussian(12, 2, 3);
        let det = OnlineKernelCusum::new(config(4, 3, 1.0), &reference, 7).unwrap();
        let mut used: Vec<Vec<f64>> = (0..3).flat_map(|n| det.ref_block(n)).collect();
        let mut all = reference.clone();
        used.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(used, all);
        assert!(OnlineKernelCusum::new(config(4, 3, 1.0), &reference[..11], 7).is_err());
    }

    #[test]
    fn block_draw_is_seeded() {
        let reference = gaussian(200, 2, 3);
        let a = OnlineKernelCusum::new(config(5, 4, 1.0), &reference, 1).unwrap();
        let b = OnlineKernelCusum::new(config(5, 4, 1.0), &reference, 1).unwrap();
        let c = OnlineKernelCusum::new(config(5, 4, 1.0), &reference, 2).unwrap();
        assert_eq!(a.snapshot().ref_blocks, b.snapshot().ref_blocks);
        assert_ne!(a.snapshot().ref_blocks, c.snapshot().ref_blocks);
    }

    #[test]
    fn warm_up_and_first_statistic() {
        let reference = gaussian(40, 2, 3);
        let mut det = OnlineKernelCusum::new(config(6, 3, f64::NEG_INFINITY), &reference, 1).unwrap();
        let first = det.step(&[0.1, 0.2]).unwrap();
        assert_eq!(first.statistic, f64::NEG_INFINITY);
        assert!(!first.alarm);
        assert_eq!(first.argmax_b, 0);
        let second = det.step(&[0.3, -0.2]).unwrap();
        assert!(second.statistic.is_finite());
        assert!(second.alarm);
        assert_eq!(second.argmax_b, 2);
        assert!(det.step(&[1.0]).is_err());
    }

    #[test]
    fn recursive_matches_scratch() {
        let reference = gaussian(60, 3, 11);
        let stream = gaussian(40, 3, 12);
        let mut det = OnlineKernelCusum::new(config(7, 4, f64::INFINITY), &reference, 5).unwrap();
        for y in &stream {
            let r = det.step_profile(y).unwrap();
            for (b, z) in r.per_b.unwrap() {
                assert!((z - from_scratch(&det, b)).abs() <= 1e-10, "t={} b={b}", r.t);
            }
            assert!(det.cache_deviation() <= 1e-12);
        }
    }

    #[test]
    fn repeated_reference_point_stream_matches_scratch() {
        let reference = gaussian(30, 2, 21);
        let mut det = OnlineKernelCusum::new(config(5, 3, f64::INFINITY), &reference, 2).unwrap();
        let point = reference[0].clone();
        for _ in 0..12 {
            let r = det.step_profile(&point).unwrap();
            for (b, z) in r.per_b.unwrap() {
                assert!((z - from_scratch(&det, b)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn b_min_restricts_scan() {
        let reference = gaussian(60, 2, 4);
        let mut det = OnlineKernelCusum::new(config(6, 3, 0.0).with_b_min(6), &reference, 3).unwrap();
        for (i, y) in gaussian(10, 2, 5).iter().enumerate() {
            let r = det.step_profile(y).unwrap();
            if i + 1 < 6 {
                assert_eq!(r.statistic, f64::NEG_INFINITY);
            } else {
                assert_eq!(r.argmax_b, 6);
                assert_eq!(r.per_b.unwrap().len(), 1);
            }
        }
    }

    #[test]
    fn run_to_alarm_extremes() {
        let reference = gaussian(60, 2, 4);
        let stream = gaussian(30, 2, 9);
        let mut low = OnlineKernelCusum::new(config(5, 3, f64::NEG_INFINITY), &reference, 3).unwrap();
        assert_eq!(low.run_to_alarm(&stream, 30).unwrap().stopped_at, Some(2));
        let mut high = OnlineKernelCusum::new(config(5, 3, f64::INFINITY), &reference, 3).unwrap();
        let rep = high.run_to_alarm(&stream, 20).unwrap();
        assert_eq!(rep.stopped_at, None);
        assert_eq!(high.t(), 20);
        assert!(low.run_to_alarm(&stream, 0).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let reference = gaussian(60, 2, 4);
        let stream = gaussian(30, 2, 9);
        let mut det = OnlineKernelCusum::new(config(5, 3, f64::INFINITY), &reference, 3).unwrap();
        for y in &stream[..13] {
            det.step(y).unwrap();
        }
        let json = serde_json::to_string(&det.snapshot()).unwrap();
        let mut back = OnlineKernelCusum::restore(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.t(), 13);
        for y in &stream[13..] {
            let a = det.step(y).unwrap();
            let b = back.step(y).unwrap();
            assert!((a.statistic - b.statistic).abs() <= 1e-12);
            assert_eq!(a.argmax_b, b.argmax_b);
        }
    }

    #[test]
    fn oracle_agrees_inside_window_and_dominates_after() {
        let reference = gaussian(200, 2, 8);
        let stream = gaussian(25, 2, 10);
        let cfg = config(6, 3, f64::INFINITY);
        let mut win = OnlineKernelCusum::new(cfg.clone(), &reference, 4).unwrap();
        let mut orc = OracleKernelCusum::new(cfg, &reference, 4).unwrap();
        for (i, y) in stream.iter().enumerate() {
            let a = win.step(y).unwrap();
            let b = orc.step(y).unwrap();
            if i < 6 {
                if a.statistic.is_finite() {
                    assert!((a.statistic - b.statistic).abs() <= 1e-10);
                    assert_eq!(a.argmax_b, b.argmax_b);
                }
            } else {
                assert!(b.statistic >= a.statistic - 1e-10);
            }
        }
    }

    #[test]
    fn statistic_is_bounded_by_h_bound() {
        let reference = gaussian(60, 2, 4);
        let cfg = config(6, 3, f64::INFINITY);
        let mut det = OnlineKernelCusum::new(cfg.clone(), &reference, 3).unwrap();
        for y in gaussian(20, 2, 1)
            .iter()
            .map(|v| v.iter().map(|a| a * 10.0).collect::<Vec<_>>())
        {
            let r = det.step_profile(&y).unwrap();
            for (b, z) in r.per_b.unwrap() {
                let bound = 2.0 * cfg.kernel.bound / cfg.moments.var_h0(b).unwrap().sqrt();
                assert!(z.abs() <= bound);
            }
        }
    }
}

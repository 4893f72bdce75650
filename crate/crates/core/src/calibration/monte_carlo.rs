//! Monte Carlo run lengths, detection delays and threshold calibration.
//!
//! Trials are kept alive in a [`TrialPool`] and advanced lazily: a trial only
//! needs to run until its running maximum reaches the largest threshold of
//! interest (or the horizon). Its record path (the steps at which the running
//! maximum increased) then gives the exact stopping time for every smaller
//! threshold, so bisection on the empirical ARL never re-simulates.
//!
//! Each trial first consumes `prefill` pre-change observations whose
//! statistics are ignored, so counting starts with a full window.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::DistributionSpec;
use crate::error::{Error, Result};
use crate::procedure::{Procedure, ProcedureContext, ProcedureFactory};
use crate::rng::{derive_seed, stream_rng, tags};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub trials: usize,
    /// Counted observations per trial, excluding the prefill.
    pub horizon: u64,
    /// Pre-change observations fed before counting starts.
    pub prefill: usize,
    pub seed: u64,
}

impl McOptions {
    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("trials must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Progress {
    pub phase: &'static str,
    pub done: usize,
    pub total: usize,
}

pub type ProgressFn<'a> = &'a (dyn Fn(Progress) + Sync);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArlSummary {
    /// Mean run length; censored runs contribute the horizon.
    pub mean: f64,
    pub stderr: f64,
    pub censored: usize,
    pub censored_fraction: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EddSummary {
    /// Mean delay over trials that alarmed within the horizon.
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
    pub miss_count: usize,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McCalibration {
    pub target_arl: f64,
    pub threshold: f64,
    /// Empirical ARL of the calibration trials at `threshold`.
    pub arl: ArlSummary,
}

struct Trial {
    procedure: Box<dyn Procedure>,
    rng: ChaCha8Rng,
    steps: u64,
    /// `(step, value)` each time the running maximum strictly increased.
    records: Vec<(u64, f64)>,
}

impl Trial {
    fn reached(&self, b: f64) -> bool {
        self.records.last().is_some_and(|r| r.1 >= b)
    }

    fn advance(&mut self, b: f64, horizon: u64, post: &DistributionSpec) -> Result<()> {
        while self.steps < horizon && !self.reached(b) {
            let y = post.draw(&mut self.rng);
            let s = self.procedure.observe(&y)?;
            self.steps += 1;
            if s > self.records.last().map_or(f64::NEG_INFINITY, |r| r.1) {
                self.records.push((self.steps, s));
            }
        }
        Ok(())
    }

    /// First step whose statistic reaches `b`; `None` if censored.
    fn stopping_time(&self, b: f64) -> Option<u64> {
        self.records.iter().find(|r| r.1 >= b).map(|r| r.0)
    }
}

/// Independent trials of one procedure on a common stream law.
pub struct TrialPool {
    trials: Vec<Trial>,
    post: DistributionSpec,
    horizon: u64,
    /// Largest threshold every trial has been advanced to.
    covered: Option<f64>,
}

fn tick(progress: Option<ProgressFn>, phase: &'static str, counter: &AtomicUsize, total: usize) {
    let done = counter.fetch_add(1, Ordering::Relaxed) + 1;
    if let Some(p) = progress {
        p(Progress { phase, done, total });
    }
}

impl TrialPool {
    pub fn new(
        factory: &dyn ProcedureFactory,
        ctx: &ProcedureContext,
        pre: &DistributionSpec,
        post: &DistributionSpec,
        opts: &McOptions,
        progress: Option<ProgressFn>,
    ) -> Result<Self> {
        opts.validate()?;
        pre.validate()?;
        post.validate()?;
        let counter = AtomicUsize::new(0);
        let trials = (0..opts.trials)
            .into_par_iter()
            .map(|i| {
                let trial_seed = derive_seed(opts.seed, tags::TRIAL, i as u64);
                let mut procedure = factory
                    .build(ctx, derive_seed(trial_seed, tags::PROCEDURE, 0))
                    .map_err(|e| e.context(factory.name()))?;
                let mut rng = stream_rng(derive_seed(trial_seed, tags::STREAM, 0), 0);
                for _ in 0..opts.prefill {
                    procedure.observe(&pre.draw(&mut rng))?;
                }
                tick(progress, "init", &counter, opts.trials);
                Ok(Trial {
                    procedure,
                    rng,
                    steps: 0,
                    records: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            trials,
            post: post.clone(),
            horizon: opts.horizon,
            covered: None,
        })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Run every trial until its statistic reaches `b` or the horizon.
    pub fn advance_to(&mut self, b: f64, progress: Option<ProgressFn>) -> Result<()> {
        if self.covered.is_some_and(|c| b <= c) {
            return Ok(());
        }
        let total = self.trials.len();
        let counter = AtomicUsize::new(0);
        let (post, horizon) = (&self.post, self.horizon);
        self.trials.par_iter_mut().try_for_each(|t| {
            t.advance(b, horizon, post)?;
            tick(progress, "simulate", &counter, total);
            Ok::<_, Error>(())
        })?;
        self.covered = Some(b);
        Ok(())
    }

    fn stopping_times(&self, b: f64) -> Vec<Option<u64>> {
        debug_assert!(self.covered.is_some_and(|c| b <= c), "pool not advanced to {b}");
        self.trials.iter().map(|t| t.stopping_time(b)).collect()
    }

    /// Run-length summary at threshold `b`, censoring at the horizon.
    pub fn arl(&self, b: f64) -> ArlSummary {
        let times = self.stopping_times(b);
        let censored = times.iter().filter(|t| t.is_none()).count();
        let values: Vec<f64> = times.iter().map(|t| t.unwrap_or(self.horizon) as f64).collect();
        let (mean, stderr) = mean_stderr(&values);
        ArlSummary {
            mean,
            stderr,
            censored,
            censored_fraction: censored as f64 / values.len() as f64,
            trials: values.len(),
        }
    }

    /// Delay summary at threshold `b`; runs reaching the horizon are misses.
    pub fn edd(&self, b: f64) -> EddSummary {
        let times = self.stopping_times(b);
        let hits: Vec<f64> = times.iter().flatten().map(|&t| t as f64).collect();
        let (mean, stderr) = if hits.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_stderr(&hits);
            (Some(m), Some(s))
        };
        EddSummary {
            mean,
            stderr,
            miss_count: times.len() - hits.len(),
            trials: times.len(),
        }
    }

    /// Smallest threshold (to relative tolerance) whose empirical ARL is at
    /// least `gamma`, starting the upward search at `start`.
    pub fn calibrate(&mut self, gamma: f64, start: f64, progress: Option<ProgressFn>) -> Result<McCalibration> {
        if !(gamma > 1.0) || !gamma.is_finite() {
            return Err(Error::invalid(format!(
                "target ARL must be finite and > 1, got {gamma}"
            )));
        }
        if gamma > self.horizon as f64 {
            return Err(Error::Infeasible(format!(
                "target ARL {gamma} exceeds the run horizon {}",
                self.horizon
            )));
        }
        // Small steps: advancing is incremental, so a fine upward search
        // costs nothing extra while a big overshoot would push H0 trials
        // far past the target run length.
        let grow = |b: f64| 0.05f64.max(0.02 * b.abs());
        let mut hi = if start.is_finite() { start } else { 1.0 };
        let mut lo = None;
        self.advance_to(hi, progress)?;
        loop {
            let s = self.arl(hi);
            if s.mean >= gamma {
                break;
            }
            if s.censored == s.trials {
                return Err(Error::Infeasible(format!(
                    "target ARL {gamma} unreachable within horizon {}",
                    self.horizon
                )));
            }
            lo = Some(hi);
            hi += grow(hi);
            self.advance_to(hi, progress)?;
        }
        let mut lo = match lo {
            Some(l) => l,
            None => {
                let mut l = hi - grow(hi);
                while self.arl(l).mean >= gamma {
                    l -= grow(l);
                    if l < -1e6 {
                        return Err(Error::Infeasible(format!(
                            "target ARL {gamma} is met at every threshold"
                        )));
                    }
                }
                l
            }
        };
        while hi - lo > 1e-9 * hi.abs().max(1.0) {
            let mid = 0.5 * (lo + hi);
            if self.arl(mid).mean >= gamma {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(McCalibration {
            target_arl: gamma,
            threshold: hi,
            arl: self.arl(hi),
        })
    }
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Empirical ARL at `threshold` with data drawn from `dist`.
pub fn monte_carlo_arl(
    factory: &dyn ProcedureFactory,
    ctx: &ProcedureContext,
    threshold: f64,
    dist: &DistributionSpec,
    opts: &McOptions,
    progress: Option<ProgressFn>,
) -> Result<ArlSummary> {
    if threshold.is_nan() {
        return Err(Error::invalid("threshold is NaN"));
    }
    let mut pool = TrialPool::new(factory, ctx, dist, dist, opts, progress)?;
    pool.advance_to(threshold, progress)?;
    Ok(pool.arl(threshold))
}

/// Empirical detection delay when the change happens right after the prefill.
pub fn monte_carlo_edd(
    factory: &dyn ProcedureFactory,
    ctx: &ProcedureContext,
    threshold: f64,
    pre: &DistributionSpec,
    post: &DistributionSpec,
    opts: &McOptions,
    progress: Option<ProgressFn>,
) -> Result<EddSummary> {
    if threshold.is_nan() {
        return Err(Error::invalid("threshold is NaN"));
    }
    let mut pool = TrialPool::new(factory, ctx, pre, post, opts, progress)?;
    pool.advance_to(threshold, progress)?;
    Ok(pool.edd(threshold))
}

/// Thresholds meeting each target ARL on one shared pool of H0 trials.
///
/// The factory's analytic hint (if any) seeds the upward search.
pub fn calibrate_threshold_mc(
    factory: &dyn ProcedureFactory,
    ctx: &ProcedureContext,
    pre: &DistributionSpec,
    targets: &[f64],
    opts: &McOptions,
    progress: Option<ProgressFn>,
) -> Result<Vec<McCalibration>> {
    let mut pool = TrialPool::new(factory, ctx, pre, pre, opts, progress)?;
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[a].total_cmp(&targets[b]));
    let mut out: Vec<Option<McCalibration>> = vec![None; targets.len()];
    let mut start = None;
    for i in order {
        let gamma = targets[i];
        let first = start.or_else(|| factory.threshold_hint(ctx, gamma)).unwrap_or(1.0);
        let cal = pool
            .calibrate(gamma, first, progress)
            .map_err(|e| e.context(factory.name()))?;
        start = Some(cal.threshold);
        out[i] = Some(cal);
    }
    Ok(out.into_iter().map(|c| c.expect("every target calibrated")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelSpec;
    use crate::moments::estimate_moments;
    use crate::procedure::{KcusumFactory, ProposedFactory};
    use std::sync::Arc;

    fn context(w: usize) -> (ProcedureContext, DistributionSpec) {
        let pre = DistributionSpec::gaussian(2, 0.0, 1.0);
        let reference = pre.sample(400, 11).unwrap();
        let spec = KernelSpec::gaussian_rbf(1.5).unwrap();
        let moments = estimate_moments(&reference, &spec, 3, 5000, 1).unwrap();
        (ProcedureContext::new(Arc::new(reference), spec, moments, w), pre)
    }

    fn opts(trials: usize, horizon: u64, prefill: usize) -> McOptions {
        McOptions {
            trials,
            horizon,
            prefill,
            seed: 9,
        }
    }

    #[test]
    fn infinite_thresholds() {
        let (ctx, pre) = context(5);
        let high = monte_carlo_arl(&ProposedFactory, &ctx, f64::INFINITY, &pre, &opts(8, 30, 0), None).unwrap();
        assert_eq!(high.mean, 30.0);
        assert_eq!(high.censored_fraction, 1.0);
        let low = monte_carlo_arl(&ProposedFactory, &ctx, f64::NEG_INFINITY, &pre, &opts(8, 30, 0), None).unwrap();
        assert_eq!(low.mean, 2.0);
        assert_eq!(low.stderr, 0.0);
    }

    #[test]
    fn pool_matches_direct_runs() {
        let (ctx, pre) = context(5);
        let o = opts(6, 200, 5);
        let mut pool = TrialPool::new(&ProposedFactory, &ctx, &pre, &pre, &o, None).unwrap();
        pool.advance_to(2.5, None).unwrap();
        for b in [0.5, 1.5, 2.5] {
            let direct = monte_carlo_arl(&ProposedFactory, &ctx, b, &pre, &o, None).unwrap();
            assert_eq!(pool.arl(b), direct);
        }
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let (ctx, pre) = context(5);
        let o = opts(12, 300, 5);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| calibrate_threshold_mc(&KcusumFactory, &ctx, &pre, &[20.0, 50.0], &o, None).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn calibration_meets_targets() {
        let (ctx, pre) = context(5);
        let o = opts(40, 2000, 5);
        let cals = calibrate_threshold_mc(&ProposedFactory, &ctx, &pre, &[100.0, 30.0], &o, None).unwrap();
        assert!(cals[1].threshold < cals[0].threshold);
        for c in &cals {
            assert!(c.arl.mean >= c.target_arl);
            let mut pool = TrialPool::new(&ProposedFactory, &ctx, &pre, &pre, &o, None).unwrap();
            pool.advance_to(c.threshold, None).unwrap();
            let below = c.threshold - 1e-6 * c.threshold.abs().max(1.0);
            assert!(pool.arl(below).mean < c.target_arl);
        }
        let err = calibrate_threshold_mc(&ProposedFactory, &ctx, &pre, &[5000.0], &o, None);
        assert!(matches!(err, Err(Error::Infeasible(_))));
    }

    #[test]
    fn detection_of_large_shift_is_fast() {
        let (ctx, pre) = context(5);
        let post = DistributionSpec::gaussian(2, 8.0, 1.0);
        let e = monte_carlo_edd(&ProposedFactory, &ctx, 3.0, &pre, &post, &opts(10, 50, 5), None).unwrap();
        assert_eq!(e.miss_count, 0);
        assert!(e.mean.unwrap() <= 4.0);
    }

    #[test]
    fn progress_is_reported() {
        let (ctx, pre) = context(5);
        let seen = AtomicUsize::new(0);
        let cb = |p: Progress| {
            assert!(p.done <= p.total);
            seen.fetch_add(1, Ordering::Relaxed);
        };
        monte_carlo_arl(&ProposedFactory, &ctx, 2.0, &pre, &opts(4, 50, 0), Some(&cb)).unwrap();
        assert_eq!(seen.load(Ordering::Relaxed), 8);
    }
}

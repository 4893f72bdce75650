//! Uniform interface over detection procedures.
//!
//! Every procedure turns a stream into a statistic sequence and alarms the
//! first time that statistic reaches a threshold. Procedures are created by
//! named factories held in a [`ProcedureRegistry`], so experiments and the
//! CLI select them at runtime by name.

use std::sync::{Arc, OnceLock};

use crate::baselines::{Hotelling, HotellingReference, Kcusum, KCUSUM_DEFAULT_DELTA};
use crate::calibration::{threshold_for_arl_range, ArlMethod};
use crate::detector::{DetectorConfig, OnlineKernelCusum, StoppingReport};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::moments::MomentEstimates;

/// A running detection procedure. Thresholding happens outside, so one run
/// can be evaluated against many thresholds.
pub trait Procedure: Send {
    /// Consume one observation and return the current statistic
    /// (`-inf` while nothing is computable).
    fn observe(&mut self, y: &[f64]) -> Result<f64>;

    /// Observations consumed so far.
    fn t(&self) -> u64;

    /// Maximizing block size of the latest statistic, when meaningful.
    fn argmax_b(&self) -> usize {
        0
    }
}

/// Everything a factory may need to build a procedure.
#[derive(Debug)]
pub struct ProcedureContext {
    pub reference: Arc<Vec<Vec<f64>>>,
    pub kernel: KernelSpec,
    pub moments: MomentEstimates,
    pub w: usize,
    pub b_min: usize,
    pub kcusum_delta: f64,
    /// Reuse the KCUSUM reference pool in a fresh order once exhausted.
    pub kcusum_recycle: bool,
    /// Largest post-split sample considered by Hotelling T²; `None` is unbounded.
    pub hotelling_max_recent: Option<usize>,
    hotelling: OnceLock<Arc<HotellingReference>>,
}

impl ProcedureContext {
    pub fn new(reference: Arc<Vec<Vec<f64>>>, kernel: KernelSpec, moments: MomentEstimates, w: usize) -> Self {
        Self {
            reference,
            kernel,
            moments,
            w,
            b_min: 2,
            kcusum_delta: KCUSUM_DEFAULT_DELTA,
            kcusum_recycle: false,
            hotelling_max_recent: None,
            hotelling: OnceLock::new(),
        }
    }

    pub fn detector_config(&self, b_min: usize) -> DetectorConfig {
        DetectorConfig::new(self.w, self.kernel.clone(), f64::INFINITY, self.moments.clone()).with_b_min(b_min)
    }

    fn hotelling_reference(&self) -> Result<Arc<HotellingReference>> {
        if let Some(r) = self.hotelling.get() {
            return Ok(r.clone());
        }
        let r = Arc::new(HotellingReference::new(&self.reference)?);
        Ok(self.hotelling.get_or_init(|| r).clone())
    }
}

pub trait ProcedureFactory: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    fn build(&self, ctx: &ProcedureContext, seed: u64) -> Result<Box<dyn Procedure>>;

    /// Cheap analytic first guess for the threshold at target ARL `gamma`.
    fn threshold_hint(&self, _ctx: &ProcedureContext, _gamma: f64) -> Option<f64> {
        None
    }
}

struct KernelCusum(OnlineKernelCusum);

impl Procedure for KernelCusum {
    fn observe(&mut self, y: &[f64]) -> Result<f64> {
        let r = self.0.step(y)?;
        Ok(r.statistic)
    }

    fn t(&self) -> u64 {
        self.0.t()
    }

    fn argmax_b(&self) -> usize {
        self.0.last_argmax()
    }
}

impl Procedure for Kcusum {
    fn observe(&mut self, y: &[f64]) -> Result<f64> {
        self.step(y)
    }

    fn t(&self) -> u64 {
        Kcusum::t(self)
    }
}

impl Procedure for Hotelling {
    fn observe(&mut self, y: &[f64]) -> Result<f64> {
        self.step(y)
    }

    fn t(&self) -> u64 {
        Hotelling::t(self)
    }
}

fn kernel_hint(ctx: &ProcedureContext, b_min: usize, gamma: f64) -> Option<f64> {
    [ArlMethod::SkewnessCorrected, ArlMethod::GaussianOrder]
        .into_iter()
        .find_map(|m| threshold_for_arl_range(gamma, b_min, ctx.w, &ctx.moments, m).ok())
        .map(|r| r.threshold)
}

/// Online kernel CUSUM scanning `B ∈ [b_min, w]`.
pub struct ProposedFactory;

impl ProcedureFactory for ProposedFactory {
    fn name(&self) -> &'static str {
        "proposed"
    }

    fn description(&self) -> &'static str {
        "online kernel CUSUM, max over block sizes in [b_min, w]"
    }

    fn build(&self, ctx: &ProcedureContext, seed: u64) -> Result<Box<dyn Procedure>> {
        let det = OnlineKernelCusum::new(ctx.detector_config(ctx.b_min), &ctx.reference, seed)?;
        Ok(Box::new(KernelCusum(det)))
    }

    fn threshold_hint(&self, ctx: &ProcedureContext, gamma: f64) -> Option<f64> {
        kernel_hint(ctx, ctx.b_min, gamma)
    }
}

/// Scan-B with a single block size `w`.
pub struct ScanBFactory;

impl ProcedureFactory for ScanBFactory {
    fn name(&self) -> &'static str {
        "scanb"
    }

    fn description(&self) -> &'static str {
        "Scan-B statistic with fixed block size w"
    }

    fn build(&self, ctx: &ProcedureContext, seed: u64) -> Result<Box<dyn Procedure>> {
        let det = OnlineKernelCusum::new(ctx.detector_config(ctx.w), &ctx.reference, seed)?;
        Ok(Box::new(KernelCusum(det)))
    }

    fn threshold_hint(&self, ctx: &ProcedureContext, gamma: f64) -> Option<f64> {
        kernel_hint(ctx, ctx.w, gamma)
    }
}

pub struct KcusumFactory;

impl ProcedureFactory for KcusumFactory {
    fn name(&self) -> &'static str {
        "kcusum"
    }

    fn description(&self) -> &'static str {
        "kernel CUSUM with linear-time MMD increments"
    }

    fn build(&self, ctx: &ProcedureContext, seed: u64) -> Result<Box<dyn Procedure>> {
        let k = Kcusum::new(ctx.kernel.clone(), ctx.kcusum_delta, ctx.reference.clone(), seed)?;
        if ctx.kcusum_recycle {
            Ok(Box::new(k.recycling(seed)))
        } else {
            Ok(Box::new(k))
        }
    }
}

pub struct HotellingFactory;

impl ProcedureFactory for HotellingFactory {
    fn name(&self) -> &'static str {
        "hotelling"
    }

    fn description(&self) -> &'static str {
        "two-sample Hotelling T², max over split points"
    }

    fn build(&self, ctx: &ProcedureContext, _seed: u64) -> Result<Box<dyn Procedure>> {
        Ok(Box::new(Hotelling::new(
            ctx.hotelling_reference()?,
            ctx.hotelling_max_recent,
        )?))
    }
}

/// Named procedure factories in registration order.
pub struct ProcedureRegistry {
    factories: Vec<Box<dyn ProcedureFactory>>,
}

impl Default for ProcedureRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(ProposedFactory));
        r.register(Box::new(ScanBFactory));
        r.register(Box::new(KcusumFactory));
        r.register(Box::new(HotellingFactory));
        r
    }
}

impl ProcedureRegistry {
    pub fn empty() -> Self {
        Self { factories: Vec::new() }
    }

    /// Add a factory, replacing any existing one with the same name.
    pub fn register(&mut self, factory: Box<dyn ProcedureFactory>) {
        match self.factories.iter().position(|f| f.name() == factory.name()) {
            Some(i) => self.factories[i] = factory,
            None => self.factories.push(factory),
        }
    }

    pub fn get(&self, name: &str) -> Result<&dyn ProcedureFactory> {
        self.factories
            .iter()
            .find(|f| f.name() == name)
            .map(|f| f.as_ref())
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown procedure '{name}' (available: {})",
                    self.names().join(", ")
                ))
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.iter().map(|f| f.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn ProcedureFactory> {
        self.factories.iter().map(|f| f.as_ref())
    }
}

/// Feed `stream` into `procedure` until its statistic reaches `threshold`
/// or `horizon` observations have been consumed.
pub fn run_to_alarm<I>(procedure: &mut dyn Procedure, stream: I, threshold: f64, horizon: u64) -> Result<StoppingReport>
where
    I: IntoIterator,
    I::Item: AsRef<[f64]>,
{
    if horizon == 0 {
        return Err(Error::invalid("horizon must be >= 1"));
    }
    let mut consumed = 0;
    let mut last = f64::NEG_INFINITY;
    for y in stream {
        if consumed >= horizon {
            break;
        }
        last = procedure.observe(y.as_ref())?;
        consumed += 1;
        if last >= threshold && last > f64::NEG_INFINITY {
            return Ok(StoppingReport {
                stopped_at: Some(consumed),
                statistic_at_stop: last,
                argmax_b: procedure.argmax_b(),
                threshold,
                horizon,
                seed: None,
            });
        }
    }
    Ok(StoppingReport {
        stopped_at: None,
        statistic_at_stop: last,
        argmax_b: procedure.argmax_b(),
        threshold,
        horizon,
        seed: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::DistributionSpec;

    fn context() -> ProcedureContext {
        let reference = DistributionSpec::gaussian(2, 0.0, 1.0).sample(200, 1).unwrap();
        let moments = MomentEstimates::from_raw(0.5, 0.2, [0.0; 6], 3, 100, 0).unwrap();
        ProcedureContext::new(Arc::new(reference), KernelSpec::gaussian_rbf(1.0).unwrap(), moments, 6)
    }

    #[test]
    fn registry_lookup() {
        let reg = ProcedureRegistry::default();
        assert_eq!(reg.names(), vec!["proposed", "scanb", "kcusum", "hotelling"]);
        assert!(reg.get("scanb").is_ok());
        let err = reg.get("glr").err().unwrap().to_string();
        assert!(err.contains("available: proposed"), "{err}");
    }

    #[test]
    fn register_replaces_by_name() {
        let mut reg = ProcedureRegistry::empty();
        reg.register(Box::new(KcusumFactory));
        reg.register(Box::new(KcusumFactory));
        assert_eq!(reg.names(), vec!["kcusum"]);
    }

    #[test]
    fn every_procedure_runs() {
        let ctx = context();
        let stream = DistributionSpec::gaussian(2, 3.0, 1.0).sample(40, 2).unwrap();
        for f in ProcedureRegistry::default().iter() {
            let mut p = f.build(&ctx, 7).unwrap();
            let never = run_to_alarm(p.as_mut(), &stream, f64::INFINITY, 30).unwrap();
            assert_eq!(never.stopped_at, None, "{}", f.name());
            assert_eq!(p.t(), 30);
            let mut p = f.build(&ctx, 7).unwrap();
            let low = run_to_alarm(p.as_mut(), &stream, f64::NEG_INFINITY, 30).unwrap();
            assert!(low.stopped_at.unwrap() <= 6, "{}", f.name());
        }
    }

    #[test]
    fn kernel_hints_exist() {
        let ctx = context();
        let reg = ProcedureRegistry::default();
        let p = reg.get("proposed").unwrap().threshold_hint(&ctx, 500.0).unwrap();
        let s = reg.get("scanb").unwrap().threshold_hint(&ctx, 500.0).unwrap();
        assert!(p > 0.0 && s > 0.0);
        assert!(reg.get("kcusum").unwrap().threshold_hint(&ctx, 500.0).is_none());
    }
}

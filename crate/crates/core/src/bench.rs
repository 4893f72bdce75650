//! Declarative EDD-versus-ARL experiments.
//!
//! For each procedure and ARL target the threshold is calibrated by bisection
//! on the empirical ARL of H0 trials, then the detection delay is measured on
//! fresh trials whose stream switches to the post-change law right after a
//! pre-change warm-up of `w` observations.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_threshold_mc, McOptions, ProgressFn, TrialPool};
use crate::distribution::DistributionSpec;
use crate::error::{Error, Result};
use crate::kernel::{median_heuristic, KernelSpec};
use crate::moments::{estimate_moments, MomentEstimates, DEFAULT_DRAWS};
use crate::procedure::{ProcedureContext, ProcedureRegistry};
use crate::rng::{derive_seed, tags};

/// Reference points used for the median heuristic.
pub const MEDIAN_SUBSAMPLE: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Rule(BandwidthRule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    Median,
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Rule(BandwidthRule::Median)
    }
}

impl Bandwidth {
    /// Resolve against reference data.
    pub fn resolve(&self, reference: &[Vec<f64>]) -> Result<f64> {
        match self {
            Bandwidth::Fixed(r) => Ok(*r),
            Bandwidth::Rule(BandwidthRule::Median) => {
                median_heuristic(&reference[..reference.len().min(MEDIAN_SUBSAMPLE)])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub pre: DistributionSpec,
    pub post: DistributionSpec,
    pub procedures: Vec<String>,
    pub arl_targets: Vec<f64>,
    #[serde(default = "defaults::trials")]
    pub trials_calibrate: usize,
    #[serde(default = "defaults::trials")]
    pub trials_edd: usize,
    /// Post-change observations before a run counts as a miss.
    #[serde(default = "defaults::horizon")]
    pub horizon: u64,
    /// Run cap for the H0 calibration trials; defaults to 10x the largest target.
    #[serde(default)]
    pub calibration_horizon: Option<u64>,
    #[serde(default = "defaults::reference_size")]
    pub reference_size: usize,
    #[serde(rename = "N", alias = "n_blocks")]
    pub n_blocks: usize,
    pub w: usize,
    #[serde(default = "defaults::b_min")]
    pub b_min: usize,
    /// Pre-change observations fed before counting; defaults to `w`.
    #[serde(default)]
    pub prefill: Option<usize>,
    #[serde(default)]
    pub bandwidth: Bandwidth,
    #[serde(default = "defaults::moment_draws")]
    pub moment_draws: usize,
    #[serde(default = "defaults::kcusum_delta")]
    pub kcusum_delta: f64,
    /// Reshuffle the KCUSUM reference pool when long runs exhaust it.
    #[serde(default = "defaults::yes")]
    pub kcusum_recycle: bool,
    #[serde(default)]
    pub hotelling_max_recent: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn trials() -> usize {
        200
    }
    pub fn horizon() -> u64 {
        50
    }
    pub fn reference_size() -> usize {
        10_000
    }
    pub fn b_min() -> usize {
        2
    }
    pub fn moment_draws() -> usize {
        super::DEFAULT_DRAWS
    }
    pub fn yes() -> bool {
        true
    }
    pub fn kcusum_delta() -> f64 {
        crate::baselines::KCUSUM_DEFAULT_DELTA
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.pre.validate().map_err(|e| e.context("pre"))?;
        self.post.validate().map_err(|e| e.context("post"))?;
        if self.pre.dim != self.post.dim {
            return Err(Error::invalid(format!(
                "pre has dimension {} but post has {}",
                self.pre.dim, self.post.dim
            )));
        }
        if self.procedures.is_empty() {
            return Err(Error::invalid("at least one procedure is required"));
        }
        if self.arl_targets.is_empty() || self.arl_targets.iter().any(|&g| !(g > 1.0)) {
            return Err(Error::invalid("arl_targets must be non-empty and > 1"));
        }
        if self.trials_calibrate == 0 || self.trials_edd == 0 || self.horizon == 0 {
            return Err(Error::invalid("trial counts and horizon must be >= 1"));
        }
        if self.w < 2 || self.b_min < 2 || self.b_min > self.w || self.n_blocks == 0 {
            return Err(Error::invalid("need w >= 2, 2 <= b_min <= w and N >= 1"));
        }
        if self.reference_size < self.n_blocks * self.w {
            return Err(Error::InsufficientData {
                what: "reference samples (N*w)",
                needed: self.n_blocks * self.w,
                available: self.reference_size,
            });
        }
        Ok(())
    }

    pub fn calibration_horizon(&self) -> u64 {
        self.calibration_horizon.unwrap_or_else(|| {
            let top = self.arl_targets.iter().cloned().fold(0.0, f64::max);
            (10.0 * top).ceil() as u64
        })
    }

    pub fn prefill(&self) -> usize {
        self.prefill.unwrap_or(self.w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub procedure: String,
    pub arl_target: f64,
    pub threshold: f64,
    pub edd_mean: Option<f64>,
    pub edd_stderr: Option<f64>,
    pub miss_count: usize,
    pub trials: usize,
}

/// Calibration diagnostics kept for provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub procedure: String,
    pub arl_target: f64,
    pub threshold: f64,
    pub arl_mean: f64,
    pub arl_stderr: f64,
    pub censored_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMeta {
    pub spec: ExperimentSpec,
    pub bandwidth: f64,
    pub moments: MomentEstimates,
    pub calibration_horizon: u64,
    pub prefill: usize,
    pub calibration: Vec<CalibrationRecord>,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub meta: ExperimentMeta,
}

/// Reference sample, bandwidth and moments shared by every procedure.
pub fn prepare_context(spec: &ExperimentSpec) -> Result<(ProcedureContext, f64)> {
    let reference = spec
        .pre
        .sample(spec.reference_size, derive_seed(spec.seed, tags::REFERENCE, 0))?;
    let bandwidth = spec.bandwidth.resolve(&reference)?;
    let kernel = KernelSpec::gaussian_rbf(bandwidth)?;
    let moments = estimate_moments(&reference, &kernel, spec.n_blocks, spec.moment_draws, spec.seed)?;
    let mut ctx = ProcedureContext::new(Arc::new(reference), kernel, moments, spec.w);
    ctx.b_min = spec.b_min;
    ctx.kcusum_delta = spec.kcusum_delta;
    ctx.kcusum_recycle = spec.kcusum_recycle;
    ctx.hotelling_max_recent = spec.hotelling_max_recent;
    Ok((ctx, bandwidth))
}

pub fn run_experiment(
    spec: &ExperimentSpec,
    registry: &ProcedureRegistry,
    progress: Option<ProgressFn>,
) -> Result<ExperimentOutput> {
    spec.validate()?;
    let factories = spec
        .procedures
        .iter()
        .map(|name| registry.get(name))
        .collect::<Result<Vec<_>>>()?;
    let (ctx, bandwidth) = prepare_context(spec)?;
    let cal_opts = McOptions {
        trials: spec.trials_calibrate,
        horizon: spec.calibration_horizon(),
        prefill: spec.prefill(),
        seed: derive_seed(spec.seed, tags::TRIAL, 1),
    };
    let edd_opts = McOptions {
        trials: spec.trials_edd,
        horizon: spec.horizon,
        prefill: spec.prefill(),
        seed: derive_seed(spec.seed, tags::TRIAL, 2),
    };
    let mut rows = Vec::new();
    let mut calibration = Vec::new();
    for factory in factories {
        let name = factory.name();
        let cals = calibrate_threshold_mc(factory, &ctx, &spec.pre, &spec.arl_targets, &cal_opts, progress)?;
        let mut pool =
            TrialPool::new(factory, &ctx, &spec.pre, &spec.post, &edd_opts, progress).map_err(|e| e.context(name))?;
        let top = cals.iter().map(|c| c.threshold).fold(f64::NEG_INFINITY, f64::max);
        pool.advance_to(top, progress).map_err(|e| e.context(name))?;
        for cal in cals {
            let edd = pool.edd(cal.threshold);
            rows.push(ResultRow {
                procedure: name.to_string(),
                arl_target: cal.target_arl,
                threshold: cal.threshold,
                edd_mean: edd.mean,
                edd_stderr: edd.stderr,
                miss_count: edd.miss_count,
                trials: edd.trials,
            });
            calibration.push(CalibrationRecord {
                procedure: name.to_string(),
                arl_target: cal.target_arl,
                threshold: cal.threshold,
                arl_mean: cal.arl.mean,
                arl_stderr: cal.arl.stderr,
                censored_fraction: cal.arl.censored_fraction,
            });
        }
    }
    Ok(ExperimentOutput {
        rows,
        meta: ExperimentMeta {
            spec: spec.clone(),
            bandwidth,
            moments: ctx.moments.clone(),
            calibration_horizon: cal_opts.horizon,
            prefill: cal_opts.prefill,
            calibration,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    Json,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::invalid(format!("unknown table format '{other}'"))),
        }
    }
}

pub const CSV_HEADER: [&str; 7] = [
    "procedure",
    "arl_target",
    "threshold",
    "edd_mean",
    "edd_stderr",
    "miss_count",
    "trials",
];

pub fn emit_table(rows: &[ResultRow], format: TableFormat) -> Result<String> {
    match format {
        TableFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(CSV_HEADER).map_err(csv_error)?;
            for r in rows {
                w.serialize(r).map_err(csv_error)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        TableFormat::Json => Ok(serde_json::to_string_pretty(rows)? + "\n"),
        TableFormat::Markdown => Ok(markdown(rows)),
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::invalid(format!("csv output: {e}"))
}

/// Procedures as rows, ARL targets as columns, EDD in the cells. A dash
/// marks no detection; partial misses are annotated.
fn markdown(rows: &[ResultRow]) -> String {
    let mut targets: Vec<f64> = Vec::new();
    let mut procs: Vec<&str> = Vec::new();
    for r in rows {
        if !targets.contains(&r.arl_target) {
            targets.push(r.arl_target);
        }
        if !procs.contains(&r.procedure.as_str()) {
            procs.push(&r.procedure);
        }
    }
    let mut out = String::from("| ARL |");
    for t in &targets {
        let _ = write!(out, " {t} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(targets.len()));
    out.push('\n');
    for p in procs {
        let _ = write!(out, "| {p} |");
        for t in &targets {
            let cell = rows
                .iter()
                .find(|r| r.procedure == p && r.arl_target == *t)
                .map(|r| match (r.edd_mean, r.miss_count) {
                    (None, _) => "−".to_string(),
                    (Some(m), 0) => format!("{m:.2}"),
                    (Some(m), k) => format!("{m:.2} ({k} miss)"),
                })
                .unwrap_or_default();
            let _ = write!(out, " {cell} |");
        }
        out.push('\n');
    }
    out
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use kcpd_core::{CalibrationResult, DetectorConfig, MomentEstimates, OnlineKernelCusum};
use serde::{Deserialize, Serialize};

use crate::failure::{read_csv, read_json, write_json, Failure};
use crate::moments::{compute, resolve_kernel};
use crate::DetectArgs;

/// One alarm; also printed to stdout as a JSON line when it fires.
#[derive(Debug, Serialize, Deserialize)]
pub struct Alarm {
    /// 1-based index of the observation that raised the alarm.
    pub stopped_at: u64,
    pub statistic_at_stop: f64,
    pub argmax_b: usize,
    /// Observations since the previous restart.
    pub run_length: u64,
}

/// Contents of `report.json`. Every number is finite.
#[derive(Debug, Serialize, Deserialize)]
pub struct Report {
    pub alarms: Vec<Alarm>,
    pub observations: u64,
    pub threshold: f64,
    pub w: usize,
    pub b_min: usize,
    #[serde(rename = "N")]
    pub n_blocks: usize,
    pub bandwidth: f64,
    pub seed: u64,
    /// Largest statistic seen; absent if the window never filled to `b_min`.
    pub max_statistic: Option<f64>,
}

fn stats_writer(path: Option<&Path>) -> Result<Option<BufWriter<File>>, Failure> {
    let Some(path) = path else { return Ok(None) };
    let file = File::create(path).map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "t,statistic,argmax_b").map_err(|e| Failure::config(e.to_string()))?;
    Ok(Some(w))
}

pub fn run(args: DetectArgs) -> Result<ExitCode, Failure> {
    let calibration: Option<CalibrationResult> = args.calibration.as_deref().map(read_json).transpose()?;
    let threshold = match (&calibration, args.threshold) {
        (Some(c), None) => c.threshold,
        (None, Some(b)) if b.is_finite() => b,
        (None, Some(b)) => return Err(Failure::config(format!("threshold must be finite, got {b}"))),
        _ => return Err(Failure::config("give exactly one of --calibration or --threshold")),
    };
    let pick = |flag: Option<usize>, from_cal: Option<usize>, name: &str| match (flag, from_cal) {
        (Some(a), Some(b)) if a != b => Err(Failure::config(format!(
            "--{name} {a} conflicts with {b} in the calibration file"
        ))),
        (a, b) => Ok(a.or(b)),
    };
    let w = pick(args.w, calibration.as_ref().map(|c| c.w), "w")?.unwrap_or(50);
    let b_min = pick(args.b_min, calibration.as_ref().map(|c| c.b_min), "b-min")?.unwrap_or(2);

    let reference = read_csv(&args.reference)?;
    if reference.is_empty() {
        return Err(Failure::data("reference file has no rows"));
    }
    let (moments, kernel) = match &args.moments {
        Some(p) => {
            if args.kernel.bandwidth.is_some() {
                return Err(Failure::config(
                    "--bandwidth cannot override the kernel of a moments file",
                ));
            }
            let m: MomentEstimates = read_json(p)?;
            let kernel = m
                .kernel
                .clone()
                .ok_or_else(|| Failure::config("moments file does not record its kernel"))?;
            let m = match args.n_blocks {
                Some(n) if n != m.n_blocks => m.with_blocks(n)?,
                _ => m,
            };
            (m, kernel)
        }
        None => {
            let kernel = resolve_kernel(&args.kernel, &reference)?;
            let m = compute(
                &reference,
                &kernel,
                args.n_blocks.unwrap_or(15),
                w,
                args.kernel.draws,
                args.seed,
            )?;
            (m, kernel)
        }
    };
    let config = DetectorConfig::new(w, kernel.clone(), threshold, moments).with_b_min(b_min);
    let build = || OnlineKernelCusum::new(config.clone(), &reference, args.seed);
    let mut det = build()?;

    let mut stats = stats_writer(args.emit_stats.as_deref())?;
    let stdin;
    let source: Box<dyn std::io::Read> = match args.stream.as_deref() {
        Some(p) if p != Path::new("-") => {
            Box::new(File::open(p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?)
        }
        _ => {
            stdin = std::io::stdin();
            Box::new(stdin.lock())
        }
    };
    let stdout = std::io::stdout();
    let mut alarms = Vec::new();
    let mut observations = 0u64;
    let mut since_restart = 0u64;
    let mut max_statistic: Option<f64> = None;
    for row in kcpd_core::io::rows(source) {
        if args.horizon.is_some_and(|h| observations >= h) {
            break;
        }
        let y = row?;
        let r = det
            .step(&y)
            .map_err(|e| Failure::from(e).context(format!("row {}", observations + 1)))?;
        observations += 1;
        since_restart += 1;
        if r.statistic.is_finite() {
            max_statistic = Some(max_statistic.map_or(r.statistic, |m| m.max(r.statistic)));
        }
        if let Some(s) = stats.as_mut() {
            let z = if r.statistic.is_finite() {
                r.statistic.to_string()
            } else {
                String::new()
            };
            writeln!(s, "{observations},{z},{}", r.argmax_b).map_err(|e| Failure::config(e.to_string()))?;
        }
        if r.alarm {
            let alarm = Alarm {
                stopped_at: observations,
                statistic_at_stop: r.statistic,
                argmax_b: r.argmax_b,
                run_length: since_restart,
            };
            let mut out = stdout.lock();
            let line = serde_json::json!({"event": "alarm", "alarm": &alarm});
            let _ = writeln!(out, "{line}");
            let _ = out.flush();
            alarms.push(alarm);
            if !args.restart {
                break;
            }
            det = build()?;
            since_restart = 0;
        }
    }
    if let Some(mut s) = stats {
        s.flush().map_err(|e| Failure::config(e.to_string()))?;
    }
    let report = Report {
        observations,
        threshold,
        w,
        b_min,
        n_blocks: config.n_blocks,
        bandwidth: kernel.bandwidth,
        seed: args.seed,
        max_statistic,
        alarms,
    };
    if let Some(p) = &args.report {
        write_json(p, &report)?;
    }
    if report.alarms.is_empty() {
        eprintln!("no alarm in {observations} observations");
        Ok(ExitCode::from(3))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}

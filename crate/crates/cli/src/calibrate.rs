use std::process::ExitCode;
use std::sync::Arc;

use kcpd_core::calibration::{calibrate_threshold_mc, threshold_for_arl_range, McOptions};
use kcpd_core::procedure::ProposedFactory;
use kcpd_core::rng::derive_seed;
use kcpd_core::{ArlMethod, CalibrationResult, DistributionSpec, MomentEstimates, ProcedureContext};

use crate::failure::{read_csv, read_json, write_json, Failure};
use crate::CalibrateArgs;

/// Seed domain for CLI Monte Carlo calibration trials.
const MC_DOMAIN: u64 = 0xCA11;

pub fn read_distribution(path: &std::path::Path) -> Result<DistributionSpec, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let spec: DistributionSpec =
        toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn run(args: CalibrateArgs) -> Result<ExitCode, Failure> {
    let moments: MomentEstimates = read_json(&args.moments)?;
    let result = match args.method {
        ArlMethod::MonteCarlo => monte_carlo(&args, moments)?,
        method => threshold_for_arl_range(args.arl, args.b_min, args.w, &moments, method)?,
    };
    write_json(&args.out, &result)?;
    println!(
        "threshold {:.6} for ARL {} ({:?}, predicted {:.1})",
        result.threshold, result.target_arl, result.method, result.predicted_arl
    );
    Ok(ExitCode::SUCCESS)
}

fn monte_carlo(args: &CalibrateArgs, moments: MomentEstimates) -> Result<CalibrationResult, Failure> {
    let path = args
        .reference
        .as_ref()
        .ok_or_else(|| Failure::config("--method mc needs --reference"))?;
    let kernel = moments
        .kernel
        .clone()
        .ok_or_else(|| Failure::config("moments file does not record its kernel"))?;
    let reference = read_csv(path)?;
    let pre = match &args.pre {
        Some(p) => read_distribution(p)?,
        None => DistributionSpec::empirical(reference.clone()),
    };
    if reference.first().map(Vec::len) != Some(pre.dim) {
        return Err(Failure::data(
            "reference and pre-change distribution differ in dimension",
        ));
    }
    let mut ctx = ProcedureContext::new(Arc::new(reference), kernel, moments, args.w);
    ctx.b_min = args.b_min;
    let opts = McOptions {
        trials: args.trials,
        horizon: args.horizon.unwrap_or((10.0 * args.arl).ceil() as u64),
        prefill: args.w,
        seed: derive_seed(args.seed, MC_DOMAIN, 0),
    };
    let cal = calibrate_threshold_mc(&ProposedFactory, &ctx, &pre, &[args.arl], &opts, None)?
        .pop()
        .expect("one target");
    Ok(CalibrationResult {
        threshold: cal.threshold,
        target_arl: args.arl,
        method: ArlMethod::MonteCarlo,
        predicted_arl: cal.arl.mean,
        w: args.w,
        per_b_theta: None,
        b_min: args.b_min,
        stderr: Some(cal.arl.stderr),
        censored_fraction: Some(cal.arl.censored_fraction),
    })
}

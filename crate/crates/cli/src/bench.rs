use std::process::ExitCode;
use std::sync::Mutex;

use kcpd_core::bench::{emit_table, run_experiment, ExperimentSpec, TableFormat};
use kcpd_core::calibration::Progress;
use kcpd_core::ProcedureRegistry;

use crate::failure::{write_json, write_text, Failure};
use crate::BenchArgs;

/// Configs compiled into the binary, addressable by name.
const SHIPPED: &[(&str, &str)] = &[(
    "table3_mu2_sigma9",
    include_str!("../../../configs/table3_mu2_sigma9.toml"),
)];

fn load(config: &str) -> Result<ExperimentSpec, Failure> {
    let text = match std::fs::read_to_string(config) {
        Ok(t) => t,
        Err(e) => match SHIPPED.iter().find(|(name, _)| *name == config) {
            Some((_, t)) => t.to_string(),
            None => return Err(Failure::config(format!("{config}: {e}"))),
        },
    };
    toml::from_str(&text).map_err(|e| Failure::config(format!("{config}: {e}")))
}

pub fn run(args: BenchArgs) -> Result<ExitCode, Failure> {
    let mut spec = load(&args.config)?;
    if let Some(p) = args.procedures {
        spec.procedures = p;
    }
    if let Some(n) = args.trials {
        spec.trials_calibrate = n;
        spec.trials_edd = n;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let format: TableFormat = args.format.parse()?;
    if format == TableFormat::Markdown {
        return Err(Failure::config("results file format must be csv or json"));
    }
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Failure::config(format!("cannot create {}: {e}", args.out_dir.display())))?;

    let last = Mutex::new((String::new(), 0usize));
    let report = |p: Progress| {
        let pct = 100 * p.done / p.total.max(1);
        let mut last = last.lock().expect("progress lock");
        if last.0 != p.phase || pct >= last.1 + 10 || p.done == p.total {
            eprintln!("{:>8} {:>3}% ({}/{})", p.phase, pct, p.done, p.total);
            *last = (p.phase.to_string(), pct);
        }
    };
    let progress: Option<&(dyn Fn(Progress) + Sync)> = if args.progress { Some(&report) } else { None };

    let out = run_experiment(&spec, &ProcedureRegistry::default(), progress)?;
    let ext = if format == TableFormat::Csv { "csv" } else { "json" };
    write_text(
        &args.out_dir.join(format!("results.{ext}")),
        &emit_table(&out.rows, format)?,
    )?;
    write_json(&args.out_dir.join("meta.json"), &out.meta)?;
    print!("{}", emit_table(&out.rows, TableFormat::Markdown)?);
    Ok(ExitCode::SUCCESS)
}

//! `kcpd`: moment estimation, threshold calibration, streaming detection and
//! benchmark experiments for the online kernel CUSUM detector.
//!
//! Exit status: 0 alarm raised (or command succeeded), 3 stream ended without
//! an alarm, 1 configuration error, 2 data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kcpd_core::bench::{Bandwidth, BandwidthRule};
use kcpd_core::ArlMethod;

mod bench;
mod calibrate;
mod detect;
mod failure;
mod moments;

use failure::Failure;

#[derive(Parser)]
#[command(name = "kcpd", version, about = "Online kernel CUSUM change-point detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the null moment constants from reference data.
    Moments(MomentsArgs),
    /// Choose a detection threshold for a target average run length.
    Calibrate(CalibrateArgs),
    /// Run the detector over a stream from a file or stdin.
    Detect(DetectArgs),
    /// Run an EDD-versus-ARL experiment from a TOML config.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
pub struct KernelArgs {
    /// Gaussian kernel bandwidth, or "median" for the median heuristic.
    #[arg(long, value_parser = parse_bandwidth)]
    pub bandwidth: Option<Bandwidth>,
    /// Monte Carlo draws for the moment constants.
    #[arg(long, default_value_t = kcpd_core::moments::DEFAULT_DRAWS)]
    pub draws: usize,
}

#[derive(Args)]
pub struct MomentsArgs {
    /// Reference (pre-change) observations, one row per observation.
    #[arg(long)]
    pub reference: PathBuf,
    /// Number of reference blocks.
    #[arg(short = 'N', long = "n-blocks", default_value_t = 15)]
    pub n_blocks: usize,
    /// Window length.
    #[arg(long, default_value_t = 50)]
    pub w: usize,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short, default_value = "moments.json")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Output of `kcpd moments`.
    #[arg(long)]
    pub moments: PathBuf,
    /// Target average run length under no change.
    #[arg(long)]
    pub arl: f64,
    #[arg(long, default_value_t = 50)]
    pub w: usize,
    #[arg(long, default_value_t = 2)]
    pub b_min: usize,
    /// gaussian, skew or mc.
    #[arg(long, default_value = "skew")]
    pub method: ArlMethod,
    /// Reference data; required by `--method mc`.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// TOML distribution for simulated pre-change streams; by default
    /// `--method mc` resamples the reference rows.
    #[arg(long)]
    pub pre: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    /// Run cap per trial; defaults to 10 times the target.
    #[arg(long)]
    pub horizon: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short, default_value = "calibration.json")]
    pub out: PathBuf,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("level").required(true).args(["calibration", "threshold"])))]
pub struct DetectArgs {
    #[arg(long)]
    pub reference: PathBuf,
    /// Observations to monitor; omit or pass "-" to read stdin.
    #[arg(long)]
    pub stream: Option<PathBuf>,
    /// Output of `kcpd calibrate`; supplies threshold, w and b_min.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output of `kcpd moments`; estimated from the reference when omitted.
    #[arg(long)]
    pub moments: Option<PathBuf>,
    #[arg(short = 'N', long = "n-blocks")]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub w: Option<usize>,
    #[arg(long)]
    pub b_min: Option<usize>,
    #[command(flatten)]
    pub kernel: KernelArgs,
    /// Stop after this many observations.
    #[arg(long)]
    pub horizon: Option<u64>,
    /// Keep monitoring after an alarm with an emptied window.
    #[arg(long)]
    pub restart: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write per-step `t,statistic,argmax_b` rows here.
    #[arg(long)]
    pub emit_stats: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Experiment TOML file, or the name of a shipped config.
    pub config: String,
    /// Comma-separated subset of procedures to run.
    #[arg(long, value_delimiter = ',')]
    pub procedures: Option<Vec<String>>,
    /// Override both calibration and EDD trial counts.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for results and meta.json.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// csv or json for the results file.
    #[arg(long, default_value = "csv")]
    pub format: String,
    /// Report trial progress on stderr.
    #[arg(long)]
    pub progress: bool,
}

fn parse_bandwidth(s: &str) -> Result<Bandwidth, String> {
    if s == "median" {
        return Ok(Bandwidth::Rule(BandwidthRule::Median));
    }
    match s.parse::<f64>() {
        Ok(r) if r.is_finite() && r > 0.0 => Ok(Bandwidth::Fixed(r)),
        _ => Err(format!("expected \"median\" or a positive number, got '{s}'")),
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("KCPD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("KCPD_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(e.to_string()))
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    configure_threads()?;
    match cli.command {
        Command::Moments(a) => moments::run(a),
        Command::Calibrate(a) => calibrate::run(a),
        Command::Detect(a) => detect::run(a),
        Command::Bench(a) => bench::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

use std::process::ExitCode;

use kcpd_core::bench::MEDIAN_SUBSAMPLE;
use kcpd_core::{estimate_moments, median_heuristic, Error, KernelSpec, MomentEstimates};

use crate::failure::{read_csv, write_json, Failure};
use crate::{KernelArgs, MomentsArgs};

/// Kernel from an explicit bandwidth or the median heuristic on `reference`.
pub fn resolve_kernel(args: &KernelArgs, reference: &[Vec<f64>]) -> Result<KernelSpec, Failure> {
    let r = match &args.bandwidth {
        Some(bw) => bw.resolve(reference)?,
        None => median_heuristic(&reference[..reference.len().min(MEDIAN_SUBSAMPLE)])?,
    };
    Ok(KernelSpec::gaussian_rbf(r)?)
}

pub fn compute(
    reference: &[Vec<f64>],
    kernel: &KernelSpec,
    n_blocks: usize,
    w: usize,
    draws: usize,
    seed: u64,
) -> Result<MomentEstimates, Failure> {
    if reference.len() < n_blocks * w {
        return Err(Error::InsufficientData {
            what: "reference data (N*w rows)",
            needed: n_blocks * w,
            available: reference.len(),
        }
        .into());
    }
    Ok(estimate_moments(reference, kernel, n_blocks, draws, seed)?)
}

pub fn run(args: MomentsArgs) -> Result<ExitCode, Failure> {
    if args.w < 2 || args.n_blocks == 0 {
        return Err(Failure::config("need w >= 2 and N >= 1"));
    }
    let reference = read_csv(&args.reference)?;
    if reference.is_empty() {
        return Err(Failure::data("reference file has no rows"));
    }
    let kernel = resolve_kernel(&args.kernel, &reference)?;
    let m = compute(&reference, &kernel, args.n_blocks, args.w, args.kernel.draws, args.seed)?;
    write_json(&args.out, &m)?;
    println!("bandwidth  {:.6}", kernel.bandwidth);
    println!("C1         {:.6e}", m.c1);
    println!("C2         {:.6e}", m.c2);
    println!("rho        {:.6}", m.rho);
    for b in [2, args.w] {
        println!("skew(Z_{b:<3}) {:.6}", m.third_moment_h0(b)?);
    }
    Ok(ExitCode::SUCCESS)
}

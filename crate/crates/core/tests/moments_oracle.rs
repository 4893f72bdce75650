//! Exact checks of the H0 moment formulas on a three-point support.
//!
//! Every assignment of support points to the `(N+1)·B` sample slots is
//! enumerated, which gives the exact law of the averaged block statistic.

use kcpd_core::moments::MomentEstimates;
use kcpd_core::{mmd_unbiased, KernelSpec};

fn support() -> Vec<Vec<f64>> {
    vec![vec![0.0], vec![0.7], vec![2.1]]
}

/// Exact `(E[D], E[D²], E[D³])` for block size `b` and `n` blocks.
fn enumerate(b: usize, n: usize) -> (f64, f64, f64) {
    let pts = support();
    let spec = KernelSpec::gaussian_rbf(0.9).unwrap();
    let m = pts.len();
    let slots = (n + 1) * b;
    let total = m.pow(slots as u32);
    let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
    let mut digits = vec![0usize; slots];
    for code in 0..total {
        let mut c = code;
        for d in digits.iter_mut() {
            *d = c % m;
            c /= m;
        }
        let y: Vec<Vec<f64>> = digits[n * b..].iter().map(|&i| pts[i].clone()).collect();
        let mut stat = 0.0;
        for blk in 0..n {
            let x: Vec<Vec<f64>> = digits[blk * b..(blk + 1) * b].iter().map(|&i| pts[i].clone()).collect();
            stat += mmd_unbiased(&spec, &x, &y).unwrap();
        }
        stat /= n as f64;
        s1 += stat;
        s2 += stat * stat;
        s3 += stat * stat * stat;
    }
    let t = total as f64;
    (s1 / t, s2 / t, s3 / t)
}

fn check(b: usize, n: usize) {
    let spec = KernelSpec::gaussian_rbf(0.9).unwrap();
    let est = MomentEstimates::exhaustive_discrete(&support(), &spec, n).unwrap();
    let (mean, second, third) = enumerate(b, n);
    assert!(mean.abs() < 1e-12, "B={b} N={n}: mean {mean}");
    let var = est.var_h0(b).unwrap();
    assert!((second - var).abs() < 1e-10, "B={b} N={n}: var {second} vs {var}");
    let formula = est.third_raw_h0(b).unwrap();
    assert!(
        (third - formula).abs() < 1e-10,
        "B={b} N={n}: third {third} vs {formula}"
    );
}

#[test]
fn block_two_single_block() {
    check(2, 1);
}

#[test]
fn block_two_two_blocks() {
    check(2, 2);
}

#[test]
fn block_two_three_blocks() {
    check(2, 3);
}

#[test]
fn block_three_single_block() {
    check(3, 1);
}

#[test]
fn block_three_two_blocks() {
    check(3, 2);
}

#[test]
fn block_four_single_block() {
    check(4, 1);
}

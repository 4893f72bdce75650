//! Online kernel CUSUM change-point detection.
//!
//! The detector compares the most recent observations against `N` blocks of
//! reference data with self-normalized kernel MMD statistics, maximizes over
//! block sizes up to a window `w`, and alarms when that maximum crosses a
//! threshold. Thresholds come from analytic ARL approximations or Monte Carlo
//! calibration; [`bench`] runs procedure comparisons.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod bench;
pub mod calibration;
pub mod detector;
pub mod distribution;
pub mod error;
mod float_serde;
pub mod io;
pub mod kernel;
pub mod moments;
pub mod procedure;
pub mod rng;

pub use baselines::{scan_b_fixed, Hotelling, HotellingReference, Kcusum};
pub use calibration::{arl_approx, edd_predict, nu, recommend_window, threshold_for_arl, ArlMethod, CalibrationResult};
pub use detector::{
    h_statistic, mmd_unbiased, DetectorConfig, DetectorSnapshot, OnlineKernelCusum, OracleKernelCusum, StepResult,
    StoppingReport,
};
pub use distribution::{DistributionSpec, Family, MixtureComponent};
pub use error::{Error, Result};
pub use kernel::{eval_kernel, gram, median_heuristic, KernelFamily, KernelSpec};
pub use moments::{estimate_moments, mmd_population_estimate, MomentEstimates};
pub use procedure::{Procedure, ProcedureContext, ProcedureFactory, ProcedureRegistry};

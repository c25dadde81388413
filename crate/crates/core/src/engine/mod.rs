//! The EM/ECM driver, starting values and smoothing-parameter selection.

pub mod aic;
pub mod config;
pub mod em;
pub mod gcv;
pub mod init;

pub use aic::{select_j_aic, AicEntry, AicTable};
pub use config::{Approach, FitConfig, GridSpec, InitMethod, KernelScale, LatentKind};
pub use em::{criterion, em_fit, expected_complete, mstep, FitResult, FitWarning};
pub use gcv::{fit, fit_from, gcv_score, select_lambda_gcv};
pub use init::{init_function_estimate, init_residual_based, init_spline_shifts, initial_theta};

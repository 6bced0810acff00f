//! Linear GMM estimation with finite-sample corrected, misspecification-robust
//! variance estimators.
//!
//! The crate is organised around [`LinearMomentSystem`], a moment function
//! that is affine in the parameter, `g_i(θ) = h_i + G_i θ`. Everything else
//! consumes it:
//!
//! - [`linmoment`] builds systems from cross-sectional IV data and balanced
//!   first-differenced dynamic panels, and evaluates sample moments.
//! - [`estimate`] fits GMM in closed form, from one step up to iteration.
//! - [`variance`] produces the conventional variance of a fit together with
//!   its Windmeijer-corrected and doubly corrected versions.
//! - [`inference`] turns those into hypothesis tests, including a
//!   misspecification-robust percentile-t bootstrap.
//! - [`expansion`] evaluates the higher-order stochastic expansion terms of
//!   the one-step and two-step estimators under local misspecification.
//! - [`montecarlo`] holds the simulation designs and a seeded, parallel
//!   replication runner.

pub mod error;
pub mod estimate;
pub mod expansion;
pub mod inference;
pub mod linalg;
pub mod linmoment;
pub mod montecarlo;
pub mod variance;

pub use error::{GmmError, Result};
pub use estimate::{fit, solve_weighted, FitKind, FitPlan, FitStep, GmmFit};
pub use inference::{j_test, mr_bootstrap, t_test, BootstrapResult, SeKind, TestResult};
pub use linmoment::{
    build_ab_system, build_iv_system, LinearMomentSystem, MomentStats, PanelDataset, PanelModel,
    WeightSpec,
};
pub use variance::{variance_report, VarianceReport};

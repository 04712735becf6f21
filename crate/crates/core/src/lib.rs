//! Automatic debiased estimation of smooth functionals of M-estimands.
//!
//! A target is described by a pointwise loss (whose population minimizer is
//! the M-estimand `θ`) and a smooth functional `m(z, θ)`. The crate builds the
//! Hessian Riesz representer of the functional from the loss Hessian and
//! turns any basis fit of `θ` into a debiased estimate with a Wald interval,
//! by one-step correction, targeted fluctuation, or undersmoothed sieves.
//!
//! Row-level work runs on rayon when the default `parallel` feature is on.
//! All reductions are ordered, so results are bitwise identical for any
//! thread count and for the sequential build.

pub mod basis;
pub mod data;
pub mod error;
pub mod estimators;
pub mod fit;
pub mod functional;
pub mod loss;
pub mod par;
pub mod problem;
pub mod riesz;
pub mod simulate;
pub mod stats;

pub use basis::{combine, nested_sieve, Feature, FittedFunction, FunctionSpace, SieveConfig, SieveFamily};
pub use data::{load_csv, make_folds, CrossFitPlan, Dataset, Obs, Roles};
pub use error::{Error, Result};
pub use estimators::EstimateReport;
pub use fit::{fit_erm, FitConfig};
pub use functional::FunctionalSpec;
pub use loss::{LossKind, LossSpec, Nuisance};
pub use problem::{run_pipeline, EstimatorKind, ProblemConfig, ProblemKind};
pub use simulate::{monte_carlo, DgpKind, DgpSpec, MetricsTable, MonteCarloConfig};

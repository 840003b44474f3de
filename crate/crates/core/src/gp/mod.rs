//! Shape-constrained Gaussian process on reduced put prices over a hat-function basis.

pub mod basis;
pub mod constraints;
pub mod kernel;
pub mod mle;
pub mod model;

pub use basis::{evaluate_surface, hat_basis, BasisGrid};
pub use constraints::{build_constraints, ConstraintKind, ConstraintSystem, ViolationCounts};
pub use kernel::{matern52, KernelParams};
pub use mle::{fit_hyperparameters, marginal_log_likelihood, MleConfig, MleFit, Observations};
pub use model::{
    calibrate, conditional_gaussian, fit_map, posterior_factors, sample_posterior, GpConfig, GpModel, PathSurface,
    PosteriorConfig, PosteriorSamples, GP_MODEL_VERSION,
};

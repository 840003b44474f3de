//! Convex quadratic programming and truncated-Gaussian sampling kernels.

pub mod hmc;
pub mod qp;

pub use hmc::{sample_truncated, sample_truncated_chains, HmcConfig, SampleOutput, TruncatedGaussian};
pub use qp::{solve_qp, QpConfig, QpDiagnostics, QpSolution, QuadProgram};

use thiserror::Error;

/// Errors raised across the calibration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("curve does not cover maturity {maturity} (last tenor {last_tenor})")]
    CurveCoverage { maturity: f64, last_tenor: f64 },

    #[error("all quotes were filtered out ({0})")]
    EmptyFrame(String),

    #[error("price {price} outside the inversion domain ({lower}, {upper})")]
    InversionDomain { price: f64, lower: f64, upper: f64 },

    #[error("quadratic program is infeasible: {0}")]
    Infeasible(String),

    #[error("solver did not converge after {iterations} iterations: {detail}")]
    NonConvergence { iterations: usize, detail: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("matrix factorization failed after jitter escalation: {0}")]
    Conditioning(String),

    #[error("point ({t}, {k}) is outside the domain: {detail}")]
    Domain { t: f64, k: f64, detail: String },

    #[error("degenerate implied variance {0}")]
    DegenerateVariance(f64),

    #[error("training failed at epoch {epoch}: {detail}")]
    TrainingFailure { epoch: usize, detail: String },

    #[error("calibration scope: {0}")]
    CalibrationScope(String),

    #[error("arbitrage check failed: {0}")]
    Arbitrage(String),

    #[error("unsupported model version {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },
}

impl Error {
    /// True for errors caused by the inputs rather than by numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Schema(_)
                | Error::EmptyInput(_)
                | Error::InvalidInput(_)
                | Error::CurveCoverage { .. }
                | Error::EmptyFrame(_)
                | Error::Domain { .. }
                | Error::CalibrationScope(_)
                | Error::Arbitrage(_)
                | Error::Version { .. }
                | Error::Precondition(_)
        )
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Schema(_) => "schema",
            Error::EmptyInput(_) => "empty_input",
            Error::InvalidInput(_) => "invalid_input",
            Error::CurveCoverage { .. } => "curve_coverage",
            Error::EmptyFrame(_) => "empty_frame",
            Error::InversionDomain { .. } => "inversion_domain",
            Error::Infeasible(_) => "infeasible",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Precondition(_) => "precondition",
            Error::Conditioning(_) => "conditioning",
            Error::Domain { .. } => "domain",
            Error::DegenerateVariance(_) => "degenerate_variance",
            Error::TrainingFailure { .. } => "training_failure",
            Error::CalibrationScope(_) => "calibration_scope",
            Error::Arbitrage(_) => "arbitrage",
            Error::Version { .. } => "version",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

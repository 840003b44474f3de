//! Neural-network implied volatility surface with arbitrage penalties.

mod network;
mod train;

pub use network::{Activation, InputTransform, Layer, NnIvModel, NN_MODEL_VERSION};
pub use train::{
    compute_weights, grid_stats, loss, relative_rmse, train, CandidateReport, CandidateStatus, EpochRecord, GridStats,
    LossComponents, LossWeights, NnFit, PenaltyConfig, PenaltyGrid, PenaltyGridSpec, TrainConfig, TrainingData,
    TrainingReport,
};

use crate::error::Result;
use crate::local_vol::{self, ThetaSurface};

/// `(cal_T, butt_k)` of the model at `(T, κ)`.
pub fn dupire_terms(model: &NnIvModel, t: f64, kappa: f64) -> Result<(f64, f64)> {
    local_vol::dupire_terms(&model.theta_terms(t, kappa)?, kappa)
}

use thiserror::Error;

use crate::grad::GradError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("cell ({row}, {col}) is outside a {width}x{height} grid")]
    CellOutOfBounds {
        row: usize,
        col: usize,
        width: usize,
        height: usize,
    },

    #[error("state-action pair ({state}, {action}) was never observed")]
    UnobservedPair { state: usize, action: usize },

    #[error("successor states for evaluation point {0} are not in the transition set")]
    UnobservedEvalPoint(usize),

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("covariance is not positive definite even with jitter {0:e}")]
    NotPositiveDefinite(f64),

    #[error("unsupported action dimension {0}; only 1 or 2 are supported")]
    UnsupportedDimension(usize),

    #[error("log density is not finite at the initial point ({0})")]
    NonFiniteInit(f64),

    #[error("step size search failed: {0}")]
    StepSize(String),

    #[error("invalid sampler configuration: {0}")]
    Config(String),

    #[error("chains must have equal length >= {min}: {detail}")]
    ChainShape { min: usize, detail: String },

    #[error(transparent)]
    Grad(#[from] GradError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

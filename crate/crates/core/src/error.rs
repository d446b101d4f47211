use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariance is not symmetric (max |C_ij - C_ji| = {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(&'static str),

    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),

    #[error("mixture has no components")]
    EmptyMixture,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("tape was recorded against parameter version {recorded}, store is at {current}")]
    StaleTape { recorded: u64, current: u64 },

    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

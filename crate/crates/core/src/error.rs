use thiserror::Error;

/// Errors produced by the calibration, loss and training routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not a distribution: entries sum to {sum} (deviation {deviation:e} exceeds {tolerance:e})")]
    NotADistribution {
        sum: f64,
        deviation: f64,
        tolerance: f64,
    },

    #[error("domain error: entry {index} = {value} is outside the open interval (0, 1)")]
    Domain { index: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("model produced a non-finite output")]
    NonFiniteOutput,

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

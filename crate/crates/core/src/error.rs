//! Error type shared by every module in this crate.

use thiserror::Error;

/// Failure modes of geometry validation, kernel construction, fitting,
/// integration, and experiment configuration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite coordinate at index {0}")]
    NonFinite(usize),

    #[error("point outside chart domain: {0}")]
    ChartDomain(String),

    #[error("singular configuration: {0}")]
    Singularity(String),

    #[error("metric matrix is not symmetric positive definite at the evaluated point")]
    MetricDegeneracy,

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("trajectory time grids are incompatible: {0}")]
    GridMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config: {0}")]
    Config(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

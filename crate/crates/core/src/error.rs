use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row} after jitter {jitter:e})")]
    NotPositiveDefinite { row: usize, pivot: f64, jitter: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("latent rollout produced a non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("window too short: need {needed} steps, got {got}")]
    WindowTooShort { needed: usize, got: usize },

    #[error("trajectory too short: need {needed} steps, longest has {got}")]
    TrajectoryTooShort { needed: usize, got: usize },

    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: String },

    #[error("non-positive predictive variance at step {step}")]
    NonPositiveVariance { step: usize },

    #[error("parse error in {path} at row {row}, column `{column}`: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing column `{column}` in {path}")]
    MissingColumn { path: PathBuf, column: String },

    #[error("linear system is unstable (spectral radius {0:.6} >= 1)")]
    UnstableSpec(f64),

    #[error("training diverged after {0} consecutive non-finite steps")]
    Diverged(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

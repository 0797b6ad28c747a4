use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid region partition: {0}")]
    InvalidPartition(String),

    #[error("unknown region `{0}`")]
    UnknownRegion(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("matrix is not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("conditional covariance is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemiDefinite { min_eigenvalue: f64 },

    #[error("label sets differ between actor and observer training data")]
    LabelMismatch,

    #[error("unknown expression label `{0}`")]
    UnknownLabel(String),

    #[error("unknown identity {0}")]
    UnknownIdentity(u32),

    #[error("every paired difference is zero; no effective sample")]
    NoEffectiveSample,

    #[error("corpus error in {path}: {reason}")]
    Corpus { path: PathBuf, reason: String },

    #[error("model file error: {0}")]
    ModelFormat(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

use crate::ad::{AdError, CheckpointError};
use crate::data::DataError;

/// Errors raised while building or running the model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("parcel has no pixels")]
    EmptyParcel,
    #[error("parcel mask has no pixels")]
    EmptyMask,
    #[error("empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Top-level error for pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model predicts {model} classes but the data has {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<AdError> for Error {
    fn from(e: AdError) -> Self {
        Error::Model(ModelError::Ad(e))
    }
}

impl Error {
    /// Errors caused by bad input (configuration, files) rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::ClassMismatch { .. }
                | Error::Data(_)
                | Error::Checkpoint(_)
                | Error::Model(ModelError::Config(_))
        )
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

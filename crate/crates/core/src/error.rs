use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("unsupported layer kind `{0}`")]
    UnsupportedLayer(String),

    #[error("unknown tensor or layer `{0}`")]
    Unknown(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    /// Training diverged; `checkpoint` holds the last model that trained cleanly.
    #[error("training diverged at epoch {epoch}: loss {loss}; last good checkpoint kept")]
    DivergedWithCheckpoint { epoch: usize, loss: f64, checkpoint: Box<crate::store::Model> },

    #[error("missing gradient statistics for `{0}`")]
    MissingGradients(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

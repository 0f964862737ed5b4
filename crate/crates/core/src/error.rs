use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("zero-norm vector has no direction")]
    ZeroNorm,

    #[error("batch norm in training mode needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),

    #[error("class {class} has {available} prompt(s); two distinct views need at least 2")]
    TooFewPrompts { class: &'static str, available: usize },

    #[error("score set contains only {0} samples; both classes are required")]
    SingleClass(&'static str),

    #[error("paired differences have zero variance; the t statistic is undefined")]
    ZeroVariance,

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("unknown protocol `{0}`")]
    UnknownProtocol(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

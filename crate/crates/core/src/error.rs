use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    /// Invalid configuration or arguments. The CLI maps this to exit code 2.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },

    #[error("protocol error from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String },

    #[error("mask filling failed at mask {index}: {source}")]
    MaskFill {
        index: usize,
        #[source]
        source: Box<LabError>,
    },

    #[error("pseudonym collision: {first:?} and {second:?} both map to {pseudonym}")]
    PseudonymCollision {
        first: String,
        second: String,
        pseudonym: String,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl LabError {
    pub fn config(msg: impl Into<String>) -> Self {
        LabError::Config(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        LabError::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's configuration or input files
    /// rather than by a runtime or transport failure.
    pub fn is_config(&self) -> bool {
        match self {
            LabError::Config(_)
            | LabError::InvalidInput(_)
            | LabError::MalformedRecord { .. }
            | LabError::Serde(_) => true,
            LabError::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}

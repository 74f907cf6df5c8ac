use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VccError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VccError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("adapter unavailable: {0}")]
    AdapterUnavailable(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing prerequisite for stage `{stage}`: {detail}")]
    MissingPrerequisite { stage: String, detail: String },

    #[error("config hash mismatch for {artifact}: artifact has {found}, current config is {expected}")]
    StaleArtifact {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("undefined metric: {0}")]
    Undefined(String),
}

impl VccError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VccError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        VccError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        VccError::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}

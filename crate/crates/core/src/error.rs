use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum NcdlError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("unsupported dataset format version {found:?} (expected \"RFD1\")")]
    UnsupportedVersion { found: String },

    #[error("size mismatch in {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("known classes without training samples: {0:?}")]
    EmptyClasses(Vec<String>),

    #[error("annotation {annotation_id} references missing image {image_id}")]
    MissingImage { annotation_id: u64, image_id: u64 },

    #[error("unknown class name {0:?} in detections")]
    UnknownClass(String),

    #[error("non-finite loss at iteration {iter}: {dump}")]
    NonFiniteLoss { iter: usize, dump: String },
}

pub type Result<T, E = NcdlError> = std::result::Result<T, E>;

impl NcdlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NcdlError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        NcdlError::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        NcdlError::Config {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}

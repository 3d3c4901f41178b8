use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure in {location}: {detail}")]
    NumericFailure { location: String, detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = CacError> = std::result::Result<T, E>;

impl CacError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CacError::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        CacError::NumericFailure {
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CacError::Io {
            path: path.into(),
            source,
        }
    }
}

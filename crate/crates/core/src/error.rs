use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigViolations;

pub type Result<T, E = SvfapError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SvfapError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigViolations),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SvfapError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SvfapError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        SvfapError::Shape(msg.into())
    }
}

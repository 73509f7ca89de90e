use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MrfError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("provenance mismatch: {0}")]
    HashMismatch(String),
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MrfError {
    /// Stable machine-readable code, printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            MrfError::Param(_) => "E_PARAM",
            MrfError::Shape(_) => "E_SHAPE",
            MrfError::Usage(_) => "E_USAGE",
            MrfError::Training(_) => "E_TRAIN",
            MrfError::HashMismatch(_) => "E_HASH",
            MrfError::Format(_) => "E_FORMAT",
            MrfError::Io(_) => "E_IO",
            MrfError::Json(_) => "E_JSON",
        }
    }
}

pub type Result<T> = std::result::Result<T, MrfError>;

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(MrfError::Param(msg.into()))
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(MrfError::Shape(msg.into()))
}

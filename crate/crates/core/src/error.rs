use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CmidError>;

#[derive(Debug, Error)]
pub enum CmidError {
    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss term `{term}` at step {step}")]
    NonFinite { term: &'static str, step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl CmidError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CmidError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(field: &str, message: impl Into<String>) -> Self {
        CmidError::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

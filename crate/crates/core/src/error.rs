use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric failure at step {step}: {message}")]
    Numeric { step: u64, message: String },

    #[error("division by zero: {0}")]
    Division(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            found,
        }
    }
}

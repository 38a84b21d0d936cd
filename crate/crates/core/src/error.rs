use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("record {0}: rows have inconsistent column counts")]
    MalformedRecord(String),

    #[error("record {record_id}: non-finite sample at row {row}, column {col}")]
    NonFiniteSample {
        record_id: String,
        row: usize,
        col: usize,
    },

    #[error("record {record_id}: label {label} is out of range for {classes} classes")]
    UnknownClass {
        record_id: String,
        label: usize,
        classes: usize,
    },

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("window [{skip}, {skip}+{take}) exceeds record length {len}")]
    WindowOutOfRange {
        skip: usize,
        take: usize,
        len: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("cannot encode image: {0}")]
    Encode(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range (0..{len})")]
    Index { index: usize, len: usize },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error on line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("integrity error on line {line}: {message}")]
    Integrity { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("every record is excluded from the scan")]
    EmptyResult,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unknown record id {0:?}")]
    UnknownId(String),

    #[error("ranking percentile is undefined for a gallery of {0} record(s)")]
    UndefinedMetric(usize),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            actual,
        })
    }
}

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A file header field is missing or malformed.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    /// Input ended in the middle of a packet or record.
    #[error("truncated input at byte offset {offset}: {message}")]
    Truncated { offset: u64, message: String },

    /// Text record failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An API was called in a state that forbids it.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed architecture string.
    #[error("invalid architecture `{spec}`: {message}")]
    Architecture { spec: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }
}

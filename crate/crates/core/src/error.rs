use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{id}` at line {line}")]
    DuplicateId { id: String, line: usize },

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("extraction service error: {0}")]
    Extraction(String),

    #[error("malformed extraction response ({message}); raw payload: {raw}")]
    MalformedResponse { message: String, raw: String },

    #[error("query syntax error at offset {offset}: {message}")]
    QuerySyntax { offset: usize, message: String },

    #[error("cannot split query: {0}")]
    Unsplittable(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("all {trials} calibration trials failed; last error: {last}")]
    AllTrialsFailed { trials: usize, last: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit status for the command line: 1 usage/config, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 1,
            Error::Schema { .. }
            | Error::DuplicateId { .. }
            | Error::DimensionMismatch { .. }
            | Error::InvalidInput(_)
            | Error::MalformedResponse { .. }
            | Error::QuerySyntax { .. }
            | Error::Unsplittable(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Io { .. } => 2,
            Error::Extraction(_) | Error::AllTrialsFailed { .. } => 3,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// Pyramid fusion found adjacent levels whose shapes do not chain.
    #[error("pyramid shape chain broken at level {level}: {reason}")]
    ShapeChain { level: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or schema-violating data file. `at` is the JSON path of the offending element.
    #[error("{path}: invalid data at `{at}`: {message}")]
    Data { path: PathBuf, at: String, message: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by input files rather than programming or argument mistakes.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Data { .. })
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied data that violates an operation's preconditions.
    #[error("invalid input: {0}")]
    Input(String),

    /// Inconsistent or out-of-range configuration values.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A loss or accumulator produced a value that cannot be used.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A decoded box collapsed to zero area after clipping.
    #[error("invalid detection: decoded box is empty after clipping")]
    EmptyBox,

    #[error("{path}:{line}: record `{record}`, field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        record: String,
        field: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for input-class failures, 2 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}

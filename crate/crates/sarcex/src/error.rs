use std::path::PathBuf;

use sarcex_core::CoreError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}:{line}: missing or empty field {field:?}")]
    MissingField {
        path: PathBuf,
        line: usize,
        field: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Backend(_) => 3,
            Error::Core(CoreError::Source { .. } | CoreError::Backend(_)) => 3,
            _ => 2,
        }
    }
}

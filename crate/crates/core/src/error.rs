use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    Format(String),

    #[error("line {line}: {message}")]
    Row { line: usize, message: String },

    #[error("no rows retained from {0}")]
    EmptyTable(String),

    #[error("degenerate vector for word {word:?}: norm {norm:e}")]
    Degenerate { word: String, norm: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported container: {0}")]
    Version(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty lexicon: {0}")]
    EmptyLexicon(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// Coarse error class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Degenerate { .. } | Error::Numeric(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

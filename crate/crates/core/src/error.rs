use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what} at index {index}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("no positive bags")]
    NoPositiveBags,
    #[error("no negative bag instances")]
    NoNegativeInstances,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

/// Broad failure class, used by the command line driver to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::NonFinite(_) | Error::Numerical(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn csv(path: impl AsRef<std::path::Path>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

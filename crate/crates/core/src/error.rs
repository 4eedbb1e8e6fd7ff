use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic/header: {0}")]
    BadMagic(String),
    #[error("unsupported element kind: {0}")]
    UnsupportedKind(String),
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadMismatch { expected: usize, found: usize },
    #[error("dims mismatch: {0}")]
    DimsMismatch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate intensity range (maximum is {0})")]
    DegenerateIntensity(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("diverged gradient: {0}")]
    DivergedGradient(String),
    #[error("no labels present in either volume")]
    NoLabels,
    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

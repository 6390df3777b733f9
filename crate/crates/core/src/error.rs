use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::WindowPosition;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("vocabulary is empty")]
    EmptyVocabulary,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("vocabulary digest mismatch")]
    DigestMismatch,

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("context is empty")]
    EmptyContext,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("no teacher posterior for window at {0}")]
    MissingTeacherPosterior(WindowPosition),

    #[error("word not in vocabulary: {0}")]
    OutOfVocabulary(String),

    #[error("target word does not occur in its context")]
    TargetNotInContext,

    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("zero rank variance")]
    ZeroVariance,
}

/// Coarse classification used by the command line front end for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::NonFinite(_) | Error::ZeroVariance => ErrorKind::Numeric,
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

pub type Result<T> = std::result::Result<T, Error>;

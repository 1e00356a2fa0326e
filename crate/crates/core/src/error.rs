use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is zero (or below 1e-12)")]
    ZeroVector,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("no image anchors available (prototype bank is empty)")]
    NoAnchorsAvailable,
    #[error("{0} is not unit-norm (|norm - 1| = {1:e})")]
    NotUnitNorm(&'static str, f64),
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) | Error::InvalidSpec(_) => ErrorClass::Config,
            Error::Format(_) => ErrorClass::Io,
            _ => ErrorClass::Numerical,
        }
    }
}

/// Errors raised while reading or writing feature bundles and run artifacts.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported format version {found} (this build reads up to {supported})")]
    VersionUnsupported { found: u32, supported: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checksum mismatch for {file}: manifest {expected}, computed {actual}")]
    ChecksumMismatch {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("truncated record in {file} at byte offset {offset}")]
    TruncatedRecord { file: String, offset: u64 },
}

impl FormatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.into(),
            source,
        }
    }
}

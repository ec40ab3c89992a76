use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("tape node {node} was mutated after it was recorded")]
    TapeMutated { node: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("degenerate facing direction at frame {frame}")]
    DegenerateFacing { frame: usize },

    #[error("degenerate frame {frame}: all joints coincide")]
    DegenerateFrame { frame: usize },

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("malformed token stream at position {position}: {detail}")]
    MalformedStream { position: usize, detail: String },

    #[error("{path}: bad magic (expected {expected:?})")]
    BadMagic { path: PathBuf, expected: String },

    #[error("{path}: unsupported format version {major}.{minor}")]
    Version { path: PathBuf, major: u16, minor: u16 },

    #[error("{path}: size mismatch, expected {expected} bytes, found {actual}")]
    SizeMismatch { path: PathBuf, expected: u64, actual: u64 },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("missing dependency `{name}`: {detail}")]
    MissingDependency { name: String, detail: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

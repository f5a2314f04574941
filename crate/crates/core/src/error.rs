use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("i/o error: {0}")]
    Stream(#[from] io::Error),

    /// The byte stream is not a tensor container (bad magic, bad UTF-8, unknown codes).
    #[error("tensor container format error: {0}")]
    Format(String),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0} (only f32 is supported)")]
    UnsupportedDtype(u8),

    #[error("container truncated inside record `{record}`: expected {expected} bytes, found {found}")]
    Truncated {
        record: String,
        expected: u64,
        found: u64,
    },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("manifest error (line {line}): {reason}")]
    Manifest { line: usize, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no tensors selected: {0}")]
    NoTensors(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("misaligned data: {0}")]
    Misaligned(String),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("feature names differ: model has {expected:?}, data has {found:?}")]
    FeatureMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn at_step(self, step: u64) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}

use std::path::PathBuf;

use pavae_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("parameter {0} has no gradient")]
    MissingGradient(String),

    #[error("optimizer state does not match parameter {0}")]
    OptimizerMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("surface distance is undefined: {0} mask is empty")]
    UndefinedDistance(&'static str),

    #[error("mask value {value} at index {index} is not binary")]
    NotBinary { index: usize, value: f64 },

    #[error("resolution mismatch: expected side {expected}, got {actual}")]
    Resolution { expected: usize, actual: usize },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("{0} produced only empty masks; the model is degenerate")]
    DegenerateModel(String),

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("{path}: bad magic {found:?}, expected \"PVAE\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported version {found}")]
    BadVersion { path: PathBuf, found: u8 },

    #[error("{path}: unsupported dtype code {found}")]
    BadDtype { path: PathBuf, found: u8 },

    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: mask voxel {index} holds {value}, masks must be 0 or 1")]
    MaskRange { path: PathBuf, index: usize, value: u8 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Self::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

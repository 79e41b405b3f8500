use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes: expected \"FVEC1\\0\", found {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("truncated payload: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },

    #[error("trailing bytes: {extra} bytes after the last record")]
    TrailingBytes { extra: usize },

    #[error("record {record}: label {label} out of range for {class_count} classes")]
    LabelOutOfRange { record: usize, label: u32, class_count: u32 },

    #[error("record {record}: negative group id {group}")]
    NegativeGroup { record: usize, group: i32 },

    #[error("record {record}, feature {feature}: non-finite value {value}")]
    NonFinite { record: usize, feature: usize, value: f32 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence(_))
    }
}

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

    #[error("missing sidecar file {0}")]
    MissingSidecar(PathBuf),

    #[error("malformed sidecar {path}: {message}")]
    MalformedSidecar { path: PathBuf, message: String },

    #[error("dimension mismatch: header declares {expected} bytes, file holds {actual}")]
    DimensionMismatch { expected: u64, actual: u64 },

    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("rasters are not grid-compatible")]
    GridMismatch,

    #[error("pixel ({row}, {col}) is outside the {width}x{height} grid")]
    OutOfBounds {
        row: i64,
        col: i64,
        width: usize,
        height: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("duplicate acquisition date {0}")]
    DuplicateDate(String),

    #[error("duplicate acquisition id {0}")]
    DuplicateId(String),

    #[error("need at least {needed} items, got {got}")]
    TooFew { needed: usize, got: usize },

    #[error("window size must be odd, got {0}")]
    EvenWindow(usize),

    #[error("unbalanced flow problem: total supply {0}")]
    UnbalancedFlow(i64),

    #[error("no unmasked pixel available as integration seed")]
    NoSeed,

    #[error("reference pixel ({row}, {col}) is masked in the pair ending {epoch}")]
    MaskedReference { epoch: String, row: usize, col: usize },

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

    /// True for errors caused by the environment (files, permissions, JSON
    /// syntax) rather than by violated data contracts.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::MissingSidecar(_) | Error::MalformedSidecar { .. } | Error::Json(_)
        )
    }
}

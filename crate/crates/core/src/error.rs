use std::path::PathBuf;

/// Errors produced across the crate.
///
/// Variants are coarse on purpose: callers (the CLI and the C ABI) map each one
/// to a stable exit or error code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("trace too short: need at least {needed} points, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("trace is flat: total smoothed gain {gain} below threshold {threshold}")]
    AllFlat { gain: f64, threshold: f64 },

    #[error("no checkpoint at or before iteration {0}")]
    NoCheckpoint(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("out of memory: {0}")]
    OutOfMemory(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated checkpoint{}: {detail}", .tensor.as_ref().map(|t| format!(" in tensor `{t}`")).unwrap_or_default())]
    Truncation { tensor: Option<String>, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;

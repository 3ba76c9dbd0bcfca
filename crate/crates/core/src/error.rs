use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes {found:?}, expected \"VLCT\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported trace format version {found} (this build reads version 1)")]
    UnsupportedVersion { found: u32 },

    #[error("truncated trace file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("trailing data in trace file: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },

    #[error("non-finite value in layer {layer} {tensor} tensor at flat index {index}")]
    NonFinite {
        layer: usize,
        tensor: &'static str,
        index: usize,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("threshold p = {0} must lie strictly inside (0, 1)")]
    InvalidThreshold(f64),

    #[error("input must be non-empty")]
    EmptyInput,

    #[error("input must be finite and non-negative, found {0}")]
    InvalidEntry(f64),

    #[error("trace has no post-vision tokens (tau = 0); supply a fallback stats window")]
    NoPostVisionTokens,

    #[error("trace has no decoding rows (decode_len = 0)")]
    NoDecodingRows,

    #[error("correlation undefined: curve `{0}` has zero variance")]
    ZeroVariance(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("every layer is fully sparse; budget normaliser is zero")]
    DegenerateSparsity,

    #[error("kept count must be at least 1")]
    ZeroKeptCount,

    #[error("top-k size must be at least 1")]
    EmptyTopK,

    #[error("benchmark needs {required_bytes} bytes of buffers, above the {limit_bytes} byte limit")]
    SpecTooLarge {
        required_bytes: u64,
        limit_bytes: u64,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error is a write to a closed pipe, such as stdout piped into `head`.
    pub fn is_broken_pipe(&self) -> bool {
        let kind = match self {
            Error::Io { source, .. } => Some(source.kind()),
            Error::Json(e) => e.io_error_kind(),
            Error::Csv(e) => match e.kind() {
                csv::ErrorKind::Io(io) => Some(io.kind()),
                _ => None,
            },
            _ => None,
        };
        kind == Some(std::io::ErrorKind::BrokenPipe)
    }

    pub(crate) fn spec(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidSpec {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation rejected its input (shape mismatch, invalid range, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration violates its documented invariants.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Input is structurally valid but carries no usable signal
    /// (e.g. a constant image handed to Otsu thresholding).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A metric's denominator is zero; reported instead of a silent 0.
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    /// A public operation produced a NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// Dataset layout or content problem (missing class folder, bad manifest, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Checkpoint corruption and compatibility failures, each distinct so callers
/// can tell a truncated file from a bad CRC from a missing tensor.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("unknown checkpoint format version {0}")]
    UnknownVersion(u16),
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint config is malformed: {0}")]
    BadConfig(String),
    #[error("parameter {0:?} required by the config is missing")]
    MissingParameter(String),
    #[error("parameter {0:?} is not part of the config")]
    UnexpectedParameter(String),
    #[error("parameter {name:?} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("unknown payload code {0} in checkpoint entry")]
    UnknownPayload(u8),
}

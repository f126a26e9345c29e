use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: extent mismatch on axis {axis}: expected {expected}, got {actual}")]
    AxisMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite loss {value} at epoch {epoch}, step {step} (batch volumes {batch:?})")]
    NonFiniteLoss {
        value: f64,
        epoch: usize,
        step: usize,
        batch: Vec<String>,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Errors raised while decoding volume files and checkpoints.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected \"GLVOL1\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("expected dtype {expected}, found {found}")]
    WrongDtype {
        expected: &'static str,
        found: &'static str,
    },
    #[error("header is truncated ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("payload shorter than header promise: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload longer than header promise: expected {expected} bytes, got {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("checkpoint manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("config fingerprint mismatch: checkpoint has {stored}, current config is {current}")]
    FingerprintMismatch { stored: String, current: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

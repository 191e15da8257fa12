//! Error type shared across the crate.

use thiserror::Error;

/// Failure classes, used by callers (notably the CLI) to map errors onto
/// exit codes without matching every variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed data, shape mismatches, bad files, i/o.
    Data,
    /// Numerical breakdown or degenerate input where a metric is undefined.
    Numeric,
}

#[derive(Debug, Error)]
pub enum DwdError {
    /// Dimension/extent mismatch between tensors, matrices or layers.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument or unusable input (missing images, bad layer id, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Numerical failure: non-finite values, solver breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Degenerate input for which the operation is undefined (e.g. an
    /// all-zero response matrix). Callers decide whether to substitute a
    /// zero result or propagate.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Malformed model/patch container (bad manifest, unknown kind, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Container format version not supported by this build.
    #[error("format version mismatch: file has version {found}, supported version is {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    /// Buffer contents do not match the checksum recorded in the manifest.
    #[error("checksum mismatch: manifest records {expected}, buffer hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    /// Buffer file shorter than the manifest declares.
    #[error("truncated buffer: manifest declares {declared} values, file holds {actual}")]
    TruncatedBuffer { declared: u64, actual: u64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl DwdError {
    pub fn class(&self) -> ErrorClass {
        match self {
            DwdError::Numeric(_) | DwdError::Degenerate(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, DwdError>;

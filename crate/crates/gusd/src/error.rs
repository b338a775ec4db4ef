//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum GusdError {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration (bad dimensions, unknown keys, out-of-range values).
    #[error("config error: {0}")]
    Config(String),

    /// Inconsistent data: dangling references, missing fields, label domain violations.
    #[error("data integrity error: {0}")]
    Integrity(String),

    /// Malformed file on disk. Carries the offending file and, for line-oriented
    /// formats, the 1-based line number.
    #[error("format error in {file}{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Format {
        file: String,
        line: Option<usize>,
        msg: String,
    },

    /// An operation produced a non-finite value (overflowed exp, NaN loss, ...).
    #[error("non-finite value produced by `{op}`{}", detail.as_ref().map(|d| format!(": {d}")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        detail: Option<String>,
    },

    /// An API contract was violated (non-scalar loss, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GusdError {
    /// Process exit code for the CLI: config errors are 2, data errors 3,
    /// everything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            GusdError::Config(_) => 2,
            GusdError::Integrity(_) | GusdError::Format { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, GusdError>;

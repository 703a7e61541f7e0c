//! Error types shared across the library.

use thiserror::Error;

/// Library-wide error type. Variants are grouped by failure class so callers
/// (notably the CLI) can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter sits outside its mathematical domain.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Tensor or vector shapes do not line up for an operation.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// An iterative procedure diverged; `step` is the first bad iteration.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    /// A binary payload failed structural validation.
    #[error("format error in {source_kind}: {detail}")]
    Format {
        source_kind: &'static str,
        detail: String,
    },

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn format(source_kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            source_kind,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

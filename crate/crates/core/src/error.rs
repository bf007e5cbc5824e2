//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by construction and math routines in this crate.
///
/// Dimension and domain problems are reported eagerly at construction time
/// wherever possible so that the numerical kernels can assume well-formed
/// inputs.
#[derive(Debug, Error)]
pub enum Error {
    /// Two arguments that must agree in length/shape do not.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A scalar or structured parameter is outside its legal domain.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    /// An operation that needs at least one (or two) elements got none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Candidate-group metadata (sizes, anchor index, step index) disagrees
    /// between two objects that must describe the same group.
    #[error("group mismatch: {0}")]
    GroupMismatch(String),
}

impl Error {
    /// Shorthand for an [`Error::InvalidParameter`].
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

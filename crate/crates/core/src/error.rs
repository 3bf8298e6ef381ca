//! Error type shared by the numeric core.

use core::fmt;

/// Failure modes of the core algorithms. Each variant carries a static
/// context string naming the operation and the violated precondition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoreError {
    /// Operand dimensions disagree with the operation's contract.
    ShapeMismatch { context: &'static str },
    /// A value that must be finite came out NaN or infinite.
    NonFinite { context: &'static str },
    /// A scalar or size parameter lies outside its documented domain.
    InvalidArgument { context: &'static str },
    /// The input violates a structural contract (for example audio-tagged
    /// tokens reaching a visual-only path).
    ContractViolation { context: &'static str },
}

impl CoreError {
    /// The context string attached at the failure site.
    pub fn context(&self) -> &'static str {
        match self {
            CoreError::ShapeMismatch { context }
            | CoreError::NonFinite { context }
            | CoreError::InvalidArgument { context }
            | CoreError::ContractViolation { context } => context,
        }
    }
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            CoreError::NonFinite { context } => write!(f, "non-finite value: {context}"),
            CoreError::InvalidArgument { context } => write!(f, "invalid argument: {context}"),
            CoreError::ContractViolation { context } => {
                write!(f, "contract violation: {context}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

/// Convenience alias used throughout the crate.
pub type CoreResult<T> = Result<T, CoreError>;

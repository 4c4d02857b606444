//! Crate-wide error type.

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or kernel shapes are incompatible for the requested operation.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A NaN or infinity reached a boundary that requires finite input.
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    /// A configuration value violates its documented range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Malformed on-disk data; `offset` is the byte position of the problem.
    #[error("data format error at byte {offset}: {msg}")]
    DataFormat { offset: u64, msg: String },

    /// Malformed or incompatible checkpoint container.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// The training loss became non-finite.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

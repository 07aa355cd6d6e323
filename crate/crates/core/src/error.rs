use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {context}: {details}")]
    ShapeMismatch { context: String, details: String },

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value produced in {context}")]
    NonFinite { context: String },

    /// Configuration text or flags could not be validated.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary or text file, annotated with the byte offset.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            details: details.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}

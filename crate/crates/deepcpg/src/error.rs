use thiserror::Error;

/// Errors raised across the DeepCPG stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or sizes that do not line up with what an operation expects.
    #[error("structural error: {0}")]
    Structural(String),

    /// A non-finite value appeared during a computation.
    #[error("numeric error at step {step}: {what}")]
    Numeric { step: u64, what: String },

    /// An index outside the valid range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Invalid configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed checkpoint bytes.
    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn structural(msg: impl Into<String>) -> Error {
    Error::Structural(msg.into())
}

pub(crate) fn numeric(step: u64, what: impl Into<String>) -> Error {
    Error::Numeric {
        step,
        what: what.into(),
    }
}

//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes do not satisfy the operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation produced NaN or Inf. Never a silent state.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// A caller broke an API contract (non-scalar loss, odd batch size, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Parameter store misuse: duplicate names, missing names, bad ties.
    #[error("parameter store: {0}")]
    Store(String),

    /// Malformed checkpoint, manifest, tensor file, or run configuration.
    #[error("format error: {0}")]
    Format(String),

    /// Invalid model or dataset configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Training loss went non-finite; carries the step index.
    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Error {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Error {
        Error::Contract(msg.into())
    }
}

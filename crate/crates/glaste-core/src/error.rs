//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not satisfy an operation's shape contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller-side precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// An affine map required to be invertible is singular.
    #[error("singular transform: {0}")]
    Singular(String),

    /// An extent is outside the sizes the operation supports.
    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    /// A label sequence cannot be emitted within the available frames.
    #[error("infeasible label: {0}")]
    InfeasibleLabel(String),

    /// A non-finite value appeared where finite arithmetic is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A checkpoint file is malformed, truncated, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A configuration file could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset directory or manifest is malformed.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Image decode/encode failure.
    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

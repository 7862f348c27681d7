use thiserror::Error;

/// Errors shared across the detector, sampler and training stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value became NaN/Inf where finiteness is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was called before its prerequisites (e.g. backward
    /// without a cached forward, e2e training on untrained nets).
    #[error("state error: {0}")]
    State(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// The sampler could not satisfy a request (e.g. empty pool).
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Malformed model container, annotation record or image file.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

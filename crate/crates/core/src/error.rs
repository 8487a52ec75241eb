use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("state error: {0}")]
    State(String),

    /// Every weight of a compressible layer fell below its threshold.
    #[error("degenerate layer `{layer}`: {reason}")]
    DegenerateLayer { layer: String, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("corruption error: {0}")]
    Corruption(String),

    /// A quantized tensor holds a magnitude that is not on its grid.
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("training diverged at iteration {iter}: loss = {loss}")]
    Divergence { iter: usize, loss: f32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

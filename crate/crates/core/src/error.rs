use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An invalid model/layer/experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A forward pass or metric produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Training diverged (non-finite loss) at the given step.
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    /// Malformed checkpoint, CSV or JSON input.
    #[error("format error: {0}")]
    Format(String),

    /// Least-squares or ridge system could not be solved.
    #[error("fit error: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

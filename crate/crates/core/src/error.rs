use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum LvrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch} (l_bc={l_bc}, l_kl={l_kl}); learning rate too high?")]
    Diverged { epoch: usize, l_bc: f64, l_kl: f64 },

    #[error("rollout failed after {steps} control steps: {reason}")]
    RolloutFailed { steps: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LvrError {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }

    pub fn invalid_parameter(msg: impl Into<String>) -> Self {
        Self::InvalidParameter(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Self::Numerical(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }
}

pub type Result<T, E = LvrError> = std::result::Result<T, E>;

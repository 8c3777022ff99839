use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("covariance not positive semi-definite at tau = {tau}: {detail}")]
    NotPsd { tau: f64, detail: String },

    #[error("memory guard: {needed} values requested, cap is {cap}")]
    MemoryCap { needed: usize, cap: usize },

    #[error("fewer than {needed} usable points: {detail}")]
    TooFewPoints { needed: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

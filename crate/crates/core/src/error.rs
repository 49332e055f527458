use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-norm token at index {0}")]
    ZeroNormToken(usize),

    #[error("zero-norm expert weight row {0}")]
    ZeroNormExpert(usize),

    #[error("non-finite value in token {token}, feature {feature}")]
    NonFinite { token: usize, feature: usize },

    #[error("zero-variance token row {0}")]
    ZeroVariance(usize),

    #[error("no tokens")]
    Empty,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

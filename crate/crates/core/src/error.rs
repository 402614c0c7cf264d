use thiserror::Error;

/// Errors raised by the numerical kernels and the training loop.
#[derive(Debug, Error)]
pub enum FoslsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("non-finite integrand value {value} at point {point:?}")]
    NonFiniteSample { point: Vec<f64>, value: f64 },

    #[error("non-finite entry in {block} (quadrature point {point})")]
    Assembly { block: &'static str, point: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite loss at iteration {iteration} (quadrature seed {seed})")]
    NonFiniteLoss { iteration: usize, seed: u64 },

    #[error("serialization: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FoslsError>;

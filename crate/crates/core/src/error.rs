use thiserror::Error;

/// Errors raised by the estimators, samplers and experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("matrix is rank deficient (smallest singular value {smallest_singular_value:e}, tolerance {tolerance:e})")]
    RankDeficient {
        smallest_singular_value: f64,
        tolerance: f64,
    },

    #[error("singular covariance estimate: {0}")]
    SingularCovariance(String),

    #[error("degrees of freedom violated: {0}")]
    DegreesOfFreedom(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numbers themselves (singularity,
    /// degrees of freedom) rather than by malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_)
                | Error::RankDeficient { .. }
                | Error::SingularCovariance(_)
                | Error::DegreesOfFreedom(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

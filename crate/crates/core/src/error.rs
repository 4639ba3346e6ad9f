use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid phase-type distribution: {0}")]
    InvalidDistribution(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("network validation failed: {}", .0.join("; "))]
    InvalidNetwork(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The dual solver hit its iteration cap. Carries the best iterate.
    #[error("allocation solver did not converge after {iterations} iterations (KKT residual {residual:.3e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        eta: Vec<f64>,
        gamma: Vec<f64>,
    },

    #[error("capacity violated by {violation:.3e} on link {link}")]
    CapacityViolation { link: usize, violation: f64 },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("consistency check failed: {what} (max deviation {deviation:.3e})")]
    Consistency {
        what: String,
        deviation: f64,
        left: Vec<Vec<f64>>,
        right: Vec<Vec<f64>>,
    },

    #[error("linear complementarity solve did not converge at step {step} (residual {residual:.3e})")]
    LcpNoConvergence { step: usize, residual: f64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that stem from invalid input rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidDistribution(_)
                | Error::Dimension(_)
                | Error::InvalidNetwork(_)
                | Error::InvalidArgument(_)
                | Error::Json(_)
        )
    }
}

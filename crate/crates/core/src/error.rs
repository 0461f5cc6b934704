use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite at any jitter level up to {max_jitter:e}")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("I - A*W is singular (pivot ratio {pivot_ratio:e})")]
    SingularSystem { pivot_ratio: f64 },

    #[error("eigendecomposition failure: {0}")]
    EigenFailure(String),

    #[error("dense likelihood refused: n = {n} exceeds the limit of {limit}")]
    ProblemTooLarge { n: usize, limit: usize },

    #[error("no stable planted network after {attempts} attempts (largest spectral radius {max_radius})")]
    UnstableInstance { attempts: usize, max_radius: f64 },

    #[error("truth needs at least one positive and one negative off-diagonal pair")]
    DegenerateTruth,

    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("numerical failure at iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

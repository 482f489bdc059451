use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the domain of a closed-form expression (e.g. ρ ≥ 1).
    #[error("domain error: {0}")]
    Domain(String),

    /// A quantity that must be strictly positive collapsed to zero or below.
    #[error("degenerate value: {0}")]
    Degenerate(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("no feasible power allocation on the search grid")]
    Infeasible,

    #[error("grid search limited to K <= {limit} rounds, got K = {k}")]
    ComplexityGuard { k: usize, limit: usize },

    #[error("non-finite value encountered at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}

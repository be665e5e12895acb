use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("objective has no minimum: {0}")]
    NoMinimum(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("{name} = {value} outside admissible range {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("iterate diverged at k = {k}")]
    Divergence { k: usize },

    #[error("p_min undefined: every sampled gradient coordinate is below the sign threshold")]
    UndefinedPMin,

    #[error("flow integration still non-monotone after {halvings} step-size halvings")]
    Stiffness { halvings: u32 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}

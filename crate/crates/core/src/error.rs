use thiserror::Error;

pub type Result<T> = std::result::Result<T, CirceError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CirceError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("derivative matrix H is rank deficient (rank {rank} < p = {p})")]
    RankDeficientH { rank: usize, p: usize },

    #[error("group {label} has no observations")]
    EmptyGroup { label: u32 },

    #[error("noise variance r[{index}] = {value} is negative")]
    NegativeNoiseVariance { index: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("predictive variance of observation {index} is degenerate (below the variance floor)")]
    DegenerateVariance { index: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("weighted normal equations are numerically singular")]
    SingularNormalEquations,

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
}

use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid or inconsistent configuration; the message names the field.
    #[error("configuration error: {0}")]
    Config(String),
    /// An argument fell outside the domain of a function.
    #[error("domain error: {0}")]
    Domain(String),
    /// The sampling budget cannot cover the initialization rounds.
    #[error("budget error: budget {budget} is smaller than the number of arms {arms}")]
    Budget { budget: u64, arms: usize },
    /// An estimator was evaluated on too few samples.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    /// A test statistic with zero estimated variance.
    #[error("degenerate statistic: {0}")]
    Degenerate(String),
    /// Broken internal invariant. Indicates a bug, not bad input.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

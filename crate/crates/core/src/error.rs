use thiserror::Error;

/// Errors raised by the laboratory's numerical and data operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("gradient shape does not match parameter shape")]
    ShapeMismatch,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown query id {0}")]
    UnknownQuery(usize),

    #[error("unknown response id {response} for query {query}")]
    UnknownResponse { query: usize, response: usize },

    #[error("a pair needs two distinct responses, got {0} twice")]
    SameResponse(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite {what} in round {round}, step {step}")]
    Diverged {
        round: usize,
        step: usize,
        what: &'static str,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

/// Errors produced anywhere in the search / self-training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
    #[error("state space of {configs} configurations exceeds the limit of {limit}")]
    Capacity { configs: u128, limit: u128 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("autodiff: {0}")]
    Tape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

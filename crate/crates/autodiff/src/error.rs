use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in backward pass at node {node} ({op})")]
    Numeric { node: usize, op: &'static str },
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AdError> = std::result::Result<T, E>;

use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cache bounds: layer {layer} request {request} position {position} has no allocated page")]
    CacheBounds {
        layer: usize,
        request: u64,
        position: usize,
    },

    #[error("allocation miss: layer {layer} request {request} page {page} is not in the block table")]
    AllocationMiss {
        layer: usize,
        request: u64,
        page: usize,
    },

    #[error("audit failed: {0}")]
    Audit(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;

pub(crate) fn config_err(msg: impl Into<String>) -> EngineError {
    EngineError::Config(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> EngineError {
    EngineError::Contract(msg.into())
}

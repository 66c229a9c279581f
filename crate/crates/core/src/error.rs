use thiserror::Error;

/// Errors produced anywhere in the pruning / compile / execute pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension `{name}` = {value} exceeds the storage limit {limit}")]
    DimensionLimit {
        name: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("malformed data at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("target FLOPs rate {target:.3}x unreachable (best reachable {reachable:.3}x)")]
    UnreachableTarget { target: f64, reachable: f64 },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("illegal schedule: {0}")]
    Schedule(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

//! Crate-wide error type.

/// Errors produced by the toolkit.
///
/// Variants are coarse on purpose: callers usually need to distinguish
/// recoverable input problems (shape/format/config) from numerical failures
/// (instability, transform breakdown), not every individual cause.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two containers that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A grid, time axis, or geometry parameter is out of range.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A scalar argument is non-finite or out of its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// An on-disk container is malformed or inconsistent with its sidecar.
    #[error("format error: {0}")]
    Format(String),
    /// The explicit update produced a non-finite field value.
    #[error("numerical instability: {0}")]
    Instability(String),
    /// The positivity transform cannot produce a valid density.
    #[error("transform error: {0}")]
    Transform(String),
    /// A boundary tape does not match the simulation it is replayed under.
    #[error("tape mismatch: {0}")]
    TapeMismatch(String),
    /// The optimizer received a non-finite objective or inconsistent inputs.
    #[error("optimizer failure: {0}")]
    Optimizer(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

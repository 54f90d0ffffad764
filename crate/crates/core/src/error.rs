use thiserror::Error;

use crate::cache::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the compression and attention stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid cache: {0}")]
    InvalidCache(ValidationReport),
    #[error("invalid threshold {0}: must lie in [-1, 1]")]
    InvalidThreshold(f64),
    #[error("invalid block size {0}: must be at least 1")]
    InvalidBlockSize(usize),
    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),
    #[error("cannot merge an empty cluster")]
    EmptyCluster,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cache is empty")]
    EmptyCache,
    #[error("entry {index} has weight {weight}; weights must be at least 1")]
    InvalidWeight { index: usize, weight: u32 },
    #[error("invalid budget target {0}: must lie in (0, 1]")]
    InvalidTarget(f64),
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error("invalid multi-head cache: {0}")]
    InvalidMultiHead(String),
    #[error("invalid compressed cache: {0}")]
    InvalidCompressed(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Reasons an [`LlsaConfig`](crate::LlsaConfig) is rejected. Validation
/// checks in a fixed order and reports only the first violation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("block size must be at least 2, got {0}")]
    BlockSize(usize),
    #[error("sequence length and feature dimension must be positive (n={n}, d={d})")]
    EmptyShape { n: usize, d: usize },
    #[error("levels must lie in 1..={max}, got {levels}")]
    Levels { levels: usize, max: usize },
    #[error("sequence length {n} is not divisible by B^(L+1) = {required}")]
    Divisibility { n: usize, required: usize },
    #[error("enrichment levels {enrich} exceed levels {levels}")]
    EnrichLevels { enrich: usize, levels: usize },
    #[error("top-k {k} outside 1..={max} (coarsest candidate count)")]
    TopK { k: usize, max: usize },
    #[error("softmax scale must be finite and positive, got {0}")]
    Scale(f64),
    #[error("{0} key blocks do not fit 32-bit indices")]
    IndexOverflow(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{rows} rows are not divisible by {divisor}")]
    Divisibility { rows: usize, divisor: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for {bound} key blocks")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("invalid index row {row}: {reason}")]
    InvalidIndices { row: usize, reason: &'static str },
    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },
    #[error("saved forward state does not match the backward inputs")]
    StaleState,
    #[error("block size {0} is not a perfect square")]
    NotSquareBlock(usize),
    #[error("oracle refused n = {n} (cap {cap})")]
    OracleSizeCap { n: usize, cap: usize },
    #[error("finite-difference checks need a double-precision build")]
    Precision,
    #[error("malformed tensor file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

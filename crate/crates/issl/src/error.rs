use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape/dimension disagreement between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller violated an operation's contract (preconditions, invariants).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// An input too degenerate to operate on (zero vector, empty signal, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Numerical failure (non-convergence, non-finite values).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Not enough data points for the requested operation.
    #[error("insufficient points: {0}")]
    InsufficientPoints(String),

    /// Training diverged (NaN loss).
    #[error("divergence at step {step} (lr {lr:e}): {detail}")]
    Divergence { step: usize, lr: f64, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

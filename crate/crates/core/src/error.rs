use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("policy evaluation did not converge after {sweeps} sweeps (residual {residual:e} at node {node})")]
    EvaluationDiverged { sweeps: usize, residual: f64, node: usize },

    #[error("value iteration did not converge after {iterations} iterations (max change {delta:e})")]
    ValueIterationDiverged { iterations: usize, delta: f64 },

    #[error("no proper policy: terminal set unreachable from node {node}")]
    NoProperPolicy { node: usize },

    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("degenerate map: {0}")]
    Degenerate(String),

    #[error("empty boundary: {0}")]
    EmptyBoundary(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

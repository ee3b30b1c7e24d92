use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error at node {node} ({op}): {detail}")]
    Dimension {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("domain error at node {node} ({op}): non-positive entry {value}")]
    Domain {
        node: usize,
        op: &'static str,
        value: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical error at frame {frame}: {detail}")]
    Numerical { frame: usize, detail: String },

    #[error("observation at frame {frame} has zero probability under every state")]
    ZeroLikelihood { frame: usize },

    #[error("state space too large: {states} states (limit {limit})")]
    Size { states: usize, limit: usize },

    #[error("non-finite {term} at frame {frame}")]
    NonFinite { term: String, frame: usize },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

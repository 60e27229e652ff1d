use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("structural error: {0}")]
    Structural(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("edge features admit no strict total order: edges {0} and {1} have identical features")]
    NoStrictOrder(usize, usize),

    #[error("nodes not reached from the root: {0:?}")]
    Unreached(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: row {row}: {message}")]
    Ingest {
        path: String,
        row: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Input { path: String, message: String },

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

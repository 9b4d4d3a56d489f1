use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum CocoError {
    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("unknown scenario kind `{0}`")]
    UnknownScenario(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid objective: {0}")]
    InvalidObjective(String),

    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),

    #[error("singular Gram matrix: {0}")]
    Singular(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("csv header mismatch: `{path}` has {found:?}, expected {expected:?}")]
    HeaderMismatch {
        path: String,
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("non-numeric value `{value}` in {path} at row {row}, column {column}")]
    NonNumeric {
        path: String,
        row: usize,
        column: usize,
        value: String,
    },

    #[error("empty file: {0}")]
    EmptyFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CocoError>;

use coco_core::CocoError;

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for configuration and input errors.
pub const EXIT_CONFIG: i32 = 1;
/// Exit status for divergence and singular systems.
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] CocoError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Numerical(_) | Self::Core(CocoError::Singular(_)) => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        }
    }
}

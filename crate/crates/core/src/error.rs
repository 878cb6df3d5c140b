use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum KdpeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("observation with x = {0} is not an atom of the model support")]
    OffSupport(f64),

    #[error("centered kernel was built for a different model (stale kernel)")]
    StaleKernel,

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    #[error("internal consistency failure: {0}")]
    Internal(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("bootstrap failed: {failed} of {total} replications missing")]
    BootstrapFailure { failed: usize, total: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = KdpeError> = std::result::Result<T, E>;

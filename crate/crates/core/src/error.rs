use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum GulfError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid label {label} (valid range {valid})")]
    InvalidLabel { label: usize, valid: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("finite-difference oracle produced a non-finite value at coordinate {coordinate}")]
    OracleFailure { coordinate: usize },

    #[error("diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("inner solver did not converge after {iterations} iterations (residual {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },

    #[error("identity violated: {check} deviation {deviation:e} exceeds {threshold:e} (worst index {worst})")]
    IdentityViolation {
        check: String,
        deviation: f64,
        threshold: f64,
        worst: usize,
    },

    #[error("row {row}: {source}")]
    RowFailure {
        row: usize,
        #[source]
        source: Box<GulfError>,
    },

    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at row {row}, column {column}: {detail}")]
    Parse {
        row: usize,
        column: String,
        detail: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GulfError> = std::result::Result<T, E>;

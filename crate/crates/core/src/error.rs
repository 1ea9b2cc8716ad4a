use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("action {action} V exceeds voltage limit {limit} V")]
    ActionOutOfRange { action: f64, limit: f64 },

    #[error("mass matrix is singular (det = {0:e})")]
    SingularMassMatrix(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("insufficient data: need {needed} transitions, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("inference budget violated at tick {tick}: {inference_ms:.3} ms > {budget_ms:.3} ms")]
    BudgetViolation {
        tick: usize,
        inference_ms: f64,
        budget_ms: f64,
    },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("log/model mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

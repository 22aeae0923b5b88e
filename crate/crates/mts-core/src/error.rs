use thiserror::Error;

#[derive(Debug, Error)]
pub enum MtsError {
    /// Malformed tree: cycles, orphans, nonpositive weights, bad ids.
    #[error("structural error: {0}")]
    Structure(String),
    /// Input outside an operation's domain (negative costs, bad simplex, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Parameter outside the formula's domain (e.g. tau <= 3).
    #[error("domain error: {0}")]
    Domain(String),
    /// Numerical solver left its certified envelope.
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MtsError>;

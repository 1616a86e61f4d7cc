use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network shape: {0}")]
    InvalidShape(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is numerically singular (condition number {condition:.3e})")]
    Singular { condition: f64 },

    #[error(
        "regime {regime} unsatisfiable: K = {k}, QN = {qn}; {hint}"
    )]
    Unsatisfiable {
        regime: &'static str,
        k: usize,
        qn: usize,
        hint: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

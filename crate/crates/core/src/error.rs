use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("non-finite coordinate {0:?}")]
    NonFinitePoint(Vec<f64>),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range (0..{len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("singular transform (determinant {0})")]
    Singular(f64),

    #[error("non-finite energy at iteration {iteration}; recent trace: {trace}")]
    Diverged { iteration: usize, trace: String },

    #[error("label mismatch: {0}")]
    LabelMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

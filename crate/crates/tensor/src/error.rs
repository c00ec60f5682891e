use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: index ({row}, {col}) out of bounds for {height}x{width} grid")]
    IndexOutOfBounds {
        op: &'static str,
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("scatter_points: duplicate index ({row}, {col})")]
    DuplicateIndex { row: usize, col: usize },
    #[error("log: non-positive input {value} at element {index}")]
    NonPositiveLog { value: f64, index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: &'static str },

    #[error("{op}: expected {dim} = {expected}, got {actual}")]
    DimMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: expected rank {expected}, got rank {actual}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("label {label} at position {index} is outside [0, {classes}) and is not the ignore value")]
    LabelOutOfRange {
        label: u8,
        index: usize,
        classes: usize,
    },

    #[error("backward root must be a scalar, got {numel} elements")]
    NonScalarRoot { numel: usize },

    #[error("data length {actual} does not match shape element count {expected}")]
    DataLength { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

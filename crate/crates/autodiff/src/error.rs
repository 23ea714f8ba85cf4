use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: axis {axis} mismatch ({left} vs {right})")]
    Axis {
        op: &'static str,
        axis: usize,
        left: usize,
        right: usize,
    },
    #[error("shape {shape:?} holds {} values but data has {len}", shape.iter().product::<usize>())]
    Length { shape: Vec<usize>, len: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

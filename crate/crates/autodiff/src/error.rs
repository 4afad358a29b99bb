use thiserror::Error;

/// Errors raised by tensor operations and the tape.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("slice bounds {lo}..{hi} out of range for axis {axis} with extent {extent}")]
    SliceBounds {
        axis: usize,
        lo: usize,
        hi: usize,
        extent: usize,
    },
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tensor is not attached to this tape")]
    NotOnTape,
}

//! Minimal dense-tensor library with tape-based reverse-mode automatic
//! differentiation.
//!
//! The operation set is exactly what a small transformer needs: matmul,
//! softmax, layer norm, GELU, elementwise arithmetic, concat/slice/reshape,
//! reductions and cross-entropy. Everything is 64-bit and single-threaded
//! per tape; tensors detached from a tape are plain immutable values.

mod error;
mod tape;
mod tensor;

pub use error::TensorError;
pub use tape::Tape;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;

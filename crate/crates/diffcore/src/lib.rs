//! Dense `f64` tensors and a reverse-mode tape covering the operator set of
//! an encoder/decoder light-field network: strided and transposed
//! convolution, leaky ReLU, bilinear grid sampling and resizing, channel
//! concatenation, and per-view mean/variance reductions.

mod error;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::{Error, Pass, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

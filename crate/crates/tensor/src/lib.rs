//! Dense `f32`/`f64` tensors and a reverse-mode tape sized for small
//! convolutional networks on a CPU.
//!
//! The crate has three layers:
//!
//! * [`Tensor`] and the free functions in [`kernels`] do the arithmetic
//!   (im2col convolution on top of `matrixmultiply`, separable linear maps,
//!   gathers, reductions).
//! * [`Graph`] records operations on [`Var`] handles and replays them
//!   backwards. Every leaf carries a bit mask of the parameter groups it
//!   belongs to, so a backward pass can be restricted to the part of the
//!   graph that reaches one group.
//! * [`nn`] and [`optim`] provide convolution stacks, seeded initialisation
//!   and Adam.

pub mod kernels;
pub mod nn;
pub mod optim;
pub mod resample;
mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{Grads, Graph, Var};
pub use tensor::Tensor;

/// Errors raised when building tensors from untrusted shapes or data.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("expected a {expected}-d tensor, got shape {actual:?}")]
    Rank { expected: usize, actual: Vec<usize> },
}

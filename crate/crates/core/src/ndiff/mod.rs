//! Dense tensors with a reverse-mode differentiation tape.
//!
//! Forward operations are methods on [`Tape`] that both compute a value and
//! record how to differentiate it. Fused primitives from other modules plug
//! in through [`CustomOp`].

pub mod gradcheck;
pub mod kernels;
mod real;
mod tape;
mod tensor;

pub use real::{sigmoid, silu, silu_grad, Real};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

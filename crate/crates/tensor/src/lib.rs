//! Dense tensors with reverse-mode differentiation.
//!
//! Values are recorded on a [`Tape`] as ops run; [`Tape::backward`] replays
//! the trace in reverse to accumulate gradients for every trainable leaf.
//! Work in `f32` by default and switch to `f64` for gradient checks.

pub mod container;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
mod real;
mod tape;
mod tensor;

pub use container::{Container, ContainerError, EntryData};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckError, GradCheckReport};
pub use optim::{Adam, Optimizer, ParamStore, SgdMomentum};
pub use real::{DType, Real};
pub use tape::{BinaryOp, Gradients, InterpTap, Padding, ReduceOp, Tape, UnaryOp, Var};
pub use tensor::{broadcast_shape, Tensor};

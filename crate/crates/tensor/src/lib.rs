//! Minimal dense-tensor kernel with a reverse-mode autodiff tape.
//!
//! Everything the encoder learns lives in [`Tensor`] values. A forward pass
//! records operations on a [`Tape`]; [`Tape::backward`] walks the tape once in
//! reverse and leaves a gradient on every node that requires one.
//!
//! The kernel is generic over [`Scalar`] so the same code paths can run in
//! `f32` for training and in `f64` for finite-difference gradient checks.

mod checkpoint;
mod error;
mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, InputReport};
pub use scalar::Scalar;
pub use tape::{gelu_scalar, AttentionLayout, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

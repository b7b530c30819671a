//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Build a [`Tape`], register inputs with [`Tape::leaf`] (tracked) or
//! [`Tape::constant`], compose primitives on the returned [`Var`]s and call
//! [`Tape::backward`] on a scalar. Convolutions and batch normalization are
//! primitives with hand-written adjoints; everything else in `layers` is a
//! composition.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use tape::{batch_norm, concat, conv3d, conv3d_per_level, BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Computation is recorded on a [`Tape`] as it runs (define-by-run). Every
//! operation produces a [`Var`] handle; calling [`Tape::backward`] on a
//! scalar walks the tape once in reverse and returns a [`Gradients`] map.
//! The tape is rebuilt for every forward pass.
//!
//! The operator set is deliberately small: it covers exactly what the voxel
//! field, autoencoder, UNet, attention decoder and volume renderer need.

mod error;
mod tensor;
mod tape;

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod params;

pub use error::{AutodiffError, Result};
pub use gradcheck::grad_check;
pub use ops::attention::AttentionLayout;
pub use params::{BoundParams, ParamId, ParamSet};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

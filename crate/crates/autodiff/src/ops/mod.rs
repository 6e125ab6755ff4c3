//! Differentiable operations, exposed as methods on [`Var`](crate::Var).
//!
//! Layout conventions: volumes are `[C, X, Y, Z]` (row-major, `Z` fastest),
//! point batches are `[N, C]`.

pub mod attention;
mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod reduce;
mod render;
mod sampling;
mod shape;

pub use conv::conv3d_output_extent;
pub use sampling::{resize_weights, trilinear_sample_tensor};

use crate::error::{AutodiffError, Result};

pub(crate) fn ensure_same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

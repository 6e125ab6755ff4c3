use voxpart_autodiff::{Tape, Tensor};

use crate::error::{Error, Result};
use crate::registry::Registry;

/// Resamples a gradient on the decoded field `[C, X, Y, Z]` to latent
/// extents, standing in for the backward pass of the autoencoder decoder.
pub trait GradientAlignment: Send + Sync {
    fn name(&self) -> &'static str;
    fn align(&self, grad: &Tensor, latent_dims: [usize; 3]) -> Result<Tensor>;
}

/// Transpose of trilinear upsampling from latent to field extents.
fn upsample_adjoint(grad: &Tensor, latent_dims: [usize; 3]) -> Result<Tensor> {
    let s = grad.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("field gradient {s:?} is not [C, X, Y, Z]")));
    }
    let tape = Tape::new();
    let l = tape.leaf(Tensor::zeros(vec![s[0], latent_dims[0], latent_dims[1], latent_dims[2]]));
    let up = l.resize_trilinear([s[1], s[2], s[3]])?;
    let g = tape.backward(up.mul(tape.constant(grad.clone()))?.sum())?;
    Ok(g.get(l).cloned().unwrap_or_else(|| Tensor::zeros(l.shape())))
}

/// Exact chain rule through trilinear upsampling.
pub struct Adjoint;

impl GradientAlignment for Adjoint {
    fn name(&self) -> &'static str {
        "adjoint"
    }

    fn align(&self, grad: &Tensor, latent_dims: [usize; 3]) -> Result<Tensor> {
        upsample_adjoint(grad, latent_dims)
    }
}

/// Adjoint divided by the total interpolation weight each latent node
/// receives, i.e. a weighted average, so constants map to constants.
pub struct Normalized;

impl GradientAlignment for Normalized {
    fn name(&self) -> &'static str {
        "normalized"
    }

    fn align(&self, grad: &Tensor, latent_dims: [usize; 3]) -> Result<Tensor> {
        let num = upsample_adjoint(grad, latent_dims)?;
        let den = upsample_adjoint(&Tensor::ones(grad.shape().to_vec()), latent_dims)?;
        Ok(num.zip_map(&den, |a, b| if b > 0.0 { a / b } else { 0.0 })?)
    }
}

pub fn alignment_registry() -> Registry<dyn GradientAlignment> {
    Registry::new("gradient alignment")
        .with("adjoint", |_| Box::new(Adjoint) as Box<dyn GradientAlignment>)
        .with("normalized", |_| Box::new(Normalized) as Box<dyn GradientAlignment>)
}

/// Gradient on the latent prediction `[C_l, x, y, z]` from the gradient on
/// the decoded field, bypassing the decoder.
pub fn skip_gradient(rule: &dyn GradientAlignment, field_grad: &Tensor, latent_shape: &[usize]) -> Result<Tensor> {
    let s = field_grad.shape();
    if latent_shape.len() != 4 || s.len() != 4 || s[0] != latent_shape[0] {
        return Err(Error::invalid(format!(
            "gradient skip needs matching channels: field {s:?}, latent {latent_shape:?}"
        )));
    }
    rule.align(field_grad, [latent_shape[1], latent_shape[2], latent_shape[3]])
}

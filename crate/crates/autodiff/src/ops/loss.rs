use crate::error::Result;
use crate::ops::ensure_same_shape;
use crate::tape::Var;

impl<'t> Var<'t> {
    /// Mean squared error over all elements.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        ensure_same_shape("mse", &self.shape(), &target.shape())?;
        Ok(self.sub(target)?.square().mean())
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        Ok(self.softmax().pick(labels)?.log().neg().mean())
    }
}

//! Parameter-owning building blocks shared by the networks.

use rand::Rng;
use voxpart_autodiff::{BoundParams, ParamId, ParamSet, Tensor, Var};

use crate::error::Result;

/// `N(0, 1/fan_in)` weights.
pub fn init_weight<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Largest group count up to 8 that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// 3D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Conv {
            weight: ps.insert(format!("{name}.w"), init_weight(vec![cout, cin, k, k, k], cin * k * k * k, rng)),
            bias: ps.insert(format!("{name}.b"), Tensor::zeros(vec![cout])),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.conv3d(p[self.weight], self.stride, self.pad)?.add_channel(p[self.bias])?)
    }
}

/// Dense layer `x W + b` on row vectors, `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        Linear {
            weight: ps.insert(format!("{name}.w"), init_weight(vec![fan_in, fan_out], fan_in, rng)),
            bias: bias.then(|| ps.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]))),
        }
    }

    /// Zero-initialised layer.
    pub fn zeros(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: ps.insert(format!("{name}.w"), Tensor::zeros(vec![fan_in, fan_out])),
            bias: Some(ps.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]))),
        }
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p[self.weight])?;
        Ok(match self.bias {
            Some(b) => y.add_broadcast(p[b])?,
            None => y,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_divide() {
        assert_eq!(group_count(16), 8);
        assert_eq!(group_count(12), 6);
        assert_eq!(group_count(4), 4);
        assert_eq!(group_count(7), 7);
        assert_eq!(group_count(9), 3);
    }
}

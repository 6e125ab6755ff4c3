//! Denoising 3D UNet with two output heads `(L_pred, eps_pred)`.
//!
//! Time, the flattened part code and an optional conditioning embedding are
//! mixed into one conditioning vector that reaches the trunk only through
//! per-block scale/bias modulation.

use std::path::Path;

use rand::Rng;
use voxpart_autodiff::ops::conv3d_output_extent;
use voxpart_autodiff::{checkpoint, BoundParams, ParamId, ParamSet, Tape, Tensor, Var};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{group_count, Conv, Linear};

pub const PREFIX: &str = "unet.";

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub latent_dims: [usize; 3],
    pub base_width: usize,
    pub mults: Vec<usize>,
    pub time_dim: usize,
    /// Flattened part code size `K * D`.
    pub part_dim: usize,
    /// Conditioning embedding size; 0 disables the embedding input.
    pub cond_dim: usize,
    pub cond_hidden: usize,
}

/// Sinusoidal features `[sin(w_k t), cos(w_k t)]` with `w_k` geometric in
/// `[1, 1000]`; `dim` must be even.
pub fn time_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = if half > 1 {
            1000f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out[k] = (w * t).sin();
        out[half + k] = (w * t).cos();
    }
    Tensor::from_slice(&out)
}

/// `(1 + scale) * h + bias` with `proj = [scale | bias]` of shape `[1, 2C]`
/// broadcast over the spatial axes of `h [C, ...]`.
pub fn film_modulate<'t>(h: Var<'t>, proj: Var<'t>) -> Result<Var<'t>> {
    let c = h.shape()[0];
    if proj.value().numel() != 2 * c {
        return Err(Error::invalid(format!(
            "modulation has {} values for {c} channels",
            proj.value().numel()
        )));
    }
    let flat = proj.reshape(&[2 * c])?;
    let scale = flat.narrow(0, 0, c)?.add_scalar(1.0);
    let bias = flat.narrow(0, c, c)?;
    Ok(h.mul_channel(scale)?.add_channel(bias)?)
}

struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    film: Linear,
    skip: Option<Conv>,
    g_in: usize,
    g_out: usize,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, hidden: usize, rng: &mut R) -> Self {
        ResBlock {
            conv1: Conv::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            conv2: Conv::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            film: Linear::new(ps, &format!("{name}.film"), hidden, 2 * cout, true, rng),
            skip: (cin != cout).then(|| Conv::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
            g_in: group_count(cin),
            g_out: group_count(cout),
        }
    }

    fn forward<'t>(&self, p: &BoundParams<'t>, x: Var<'t>, cond: Var<'t>) -> Result<Var<'t>> {
        let h = self.conv1.forward(p, x.group_norm(self.g_in, 1e-5)?.silu())?;
        let h = film_modulate(h, self.film.forward(p, cond)?)?;
        let h = self.conv2.forward(p, h.group_norm(self.g_out, 1e-5)?.silu())?;
        let skip = match &self.skip {
            Some(s) => s.forward(p, x)?,
            None => x,
        };
        Ok(h.add(skip)?)
    }
}

pub struct UNet {
    pub cfg: UNetConfig,
    pub params: ParamSet,
    cond1: Linear,
    cond2: Linear,
    null_embedding: Option<ParamId>,
    input: Conv,
    down_blocks: Vec<ResBlock>,
    downsample: Vec<Conv>,
    mid: ResBlock,
    up_blocks: Vec<ResBlock>,
    out: Conv,
    out_groups: usize,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(cfg: UNetConfig, rng: &mut R) -> Result<Self> {
        if cfg.mults.is_empty() || cfg.time_dim % 2 != 0 || cfg.base_width == 0 {
            return Err(Error::Config("unet needs multipliers, an even time_dim and a width".into()));
        }
        let mut ps = ParamSet::new();
        let p = |n: &str| format!("{PREFIX}{n}");
        let h = cfg.cond_hidden;
        let cond_in = cfg.time_dim + cfg.part_dim + cfg.cond_dim;
        let cond1 = Linear::new(&mut ps, &p("cond1"), cond_in, h, true, rng);
        let cond2 = Linear::new(&mut ps, &p("cond2"), h, h, true, rng);
        let null_embedding = (cfg.cond_dim > 0).then(|| ps.insert(p("null_embedding"), Tensor::zeros(vec![1, cfg.cond_dim])));
        let widths: Vec<usize> = cfg.mults.iter().map(|m| m * cfg.base_width).collect();
        let input = Conv::new(&mut ps, &p("input"), cfg.latent_channels, cfg.base_width, 3, 1, rng);
        let mut down_blocks = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = cfg.base_width;
        let levels = widths.len();
        for (i, &w) in widths.iter().enumerate().take(levels - 1) {
            down_blocks.push(ResBlock::new(&mut ps, &p(&format!("down{i}")), prev, w, h, rng));
            downsample.push(Conv::new(&mut ps, &p(&format!("downsample{i}")), w, w, 3, 2, rng));
            prev = w;
        }
        let deep = widths[levels - 1];
        let mid = ResBlock::new(&mut ps, &p("mid"), prev, deep, h, rng);
        let mut up_blocks = Vec::new();
        let mut cur = deep;
        for i in (0..levels - 1).rev() {
            up_blocks.push(ResBlock::new(&mut ps, &p(&format!("up{i}")), cur + widths[i], widths[i], h, rng));
            cur = widths[i];
        }
        let out = Conv::new(&mut ps, &p("out"), cur, 2 * cfg.latent_channels, 3, 1, rng);
        let unet = UNet {
            out_groups: group_count(cur),
            cfg,
            params: ps,
            cond1,
            cond2,
            null_embedding,
            input,
            down_blocks,
            downsample,
            mid,
            up_blocks,
            out,
        };
        unet.level_dims()?;
        Ok(unet)
    }

    /// Spatial extents per level, finest first.
    fn level_dims(&self) -> Result<Vec<[usize; 3]>> {
        let mut dims = vec![self.cfg.latent_dims];
        for _ in 0..self.downsample.len() {
            let d = *dims.last().unwrap();
            let [x, y, z] = [0, 1, 2].map(|a| conv3d_output_extent(d[a], 3, 2, 1));
            dims.push([x?, y?, z?]);
        }
        Ok(dims)
    }

    /// Conditioning vector `[1, hidden]` from `(t, z, e)`.
    fn condition<'t>(&self, p: &BoundParams<'t>, t: f64, z: Var<'t>, e: Option<Var<'t>>) -> Result<Var<'t>> {
        let tape = z.tape();
        let mut parts = vec![tape.constant(time_embedding(t, self.cfg.time_dim).reshape(vec![1, self.cfg.time_dim])?)];
        if z.value().numel() != self.cfg.part_dim {
            return Err(Error::invalid(format!(
                "part code has {} values, expected {}",
                z.value().numel(),
                self.cfg.part_dim
            )));
        }
        parts.push(z.reshape(&[1, self.cfg.part_dim])?);
        match (self.null_embedding, e) {
            (Some(null), None) => parts.push(p[null]),
            (Some(_), Some(e)) => {
                if e.value().numel() != self.cfg.cond_dim {
                    return Err(Error::invalid("conditioning embedding has the wrong size"));
                }
                parts.push(e.reshape(&[1, self.cfg.cond_dim])?)
            }
            (None, Some(_)) => return Err(Error::invalid("this model takes no conditioning embedding")),
            (None, None) => {}
        }
        let c = Var::concat(&parts, 1)?;
        let c = self.cond1.forward(p, c)?.silu();
        Ok(self.cond2.forward(p, c)?.silu())
    }

    /// `(L_pred, eps_pred)` for `lt [C_l, x, y, z]`. `e = None` selects the
    /// learned null embedding when the model is conditional.
    pub fn denoise<'t>(
        &self,
        p: &BoundParams<'t>,
        lt: Var<'t>,
        t: f64,
        z: Var<'t>,
        e: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let s = lt.shape();
        let c = self.cfg.latent_channels;
        if s.len() != 4 || s[0] != c || s[1..] != self.cfg.latent_dims {
            return Err(Error::invalid(format!(
                "latent {s:?} does not match the trained geometry [{c}, {:?}]",
                self.cfg.latent_dims
            )));
        }
        let dims = self.level_dims()?;
        let cond = self.condition(p, t, z, e)?;
        let mut h = self.input.forward(p, lt)?;
        let mut skips = Vec::new();
        for (block, down) in self.down_blocks.iter().zip(&self.downsample) {
            h = block.forward(p, h, cond)?;
            skips.push(h);
            h = down.forward(p, h)?;
        }
        h = self.mid.forward(p, h, cond)?;
        for (block, level) in self.up_blocks.iter().zip((0..skips.len()).rev()) {
            h = h.resize_trilinear(dims[level])?;
            h = block.forward(p, Var::concat(&[h, skips[level]], 0)?, cond)?;
        }
        let o = self.out.forward(p, h.group_norm(self.out_groups, 1e-5)?.silu())?;
        Ok((o.narrow(0, 0, c)?, o.narrow(0, c, c)?))
    }

    /// Binds the parameters as constants and wraps them with a fixed part code.
    pub fn denoiser<'a>(&'a self, z: &'a Tensor) -> FrozenUNet<'a> {
        FrozenUNet { unet: self, z }
    }

    /// Names of the film projection parameters, for tests of the conditioning path.
    pub fn film_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.contains(".film."))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        Ok(self.params.load_named(named)?)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_named(&checkpoint::load(path)?)
    }
}

/// Inference view of a UNet with a fixed part code.
pub struct FrozenUNet<'a> {
    unet: &'a UNet,
    z: &'a Tensor,
}

impl Denoiser for FrozenUNet<'_> {
    fn predict(&self, lt: &Tensor, t: f64, embedding: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let p = self.unet.params.bind_frozen(&tape);
        let e = embedding.map(|e| tape.constant(e.clone()));
        let (l, eps) = self
            .unet
            .denoise(&p, tape.constant(lt.clone()), t, tape.constant(self.z.clone()), e)?;
        let (l, eps) = ((*l.value()).clone(), (*eps.value()).clone());
        Ok((l, eps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_cfg() -> UNetConfig {
        UNetConfig {
            latent_channels: 4,
            latent_dims: [6, 6, 6],
            base_width: 4,
            mults: vec![1, 2, 4],
            time_dim: 8,
            part_dim: 6,
            cond_dim: 0,
            cond_hidden: 8,
        }
    }

    #[test]
    fn shapes_and_z_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::new(small_cfg(), &mut rng).unwrap();
        let lt = Tensor::randn(vec![4, 6, 6, 6], 1.0, &mut rng);
        let z1 = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let z2 = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let (a, ea) = net.denoiser(&z1).predict(&lt, 0.5, None).unwrap();
        let (b, _) = net.denoiser(&z2).predict(&lt, 0.5, None).unwrap();
        assert_eq!(a.shape(), lt.shape());
        assert_eq!(ea.shape(), lt.shape());
        assert!(a.max_abs_diff(&b) > 0.0);
        assert!(net.denoiser(&z1).predict(&Tensor::zeros(vec![4, 4, 4, 4]), 0.5, None).is_err());
        let big = lt.map(|v| 10.0 * v.signum());
        assert!(net.denoiser(&z1).predict(&big, 0.9, None).unwrap().0.all_finite());
    }

    #[test]
    fn zero_film_makes_outputs_unconditional() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = UNet::new(small_cfg(), &mut rng).unwrap();
        for name in net.film_param_names() {
            let id = net.params.id_of(&name).unwrap();
            let shape = net.params.get(id).shape().to_vec();
            *net.params.get_mut(id) = Tensor::zeros(shape);
        }
        let lt = Tensor::randn(vec![4, 6, 6, 6], 1.0, &mut rng);
        let z1 = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let z2 = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let (a, _) = net.denoiser(&z1).predict(&lt, 0.2, None).unwrap();
        let (b, _) = net.denoiser(&z2).predict(&lt, 0.9, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn film_examples() {
        let tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap());
        let zero = tape.constant(Tensor::zeros(vec![1, 2]));
        assert_eq!(*film_modulate(h, zero).unwrap().value(), *h.value());
        let kill = tape.constant(Tensor::new(vec![1, 2], vec![-1.0, 0.5]).unwrap());
        assert!(film_modulate(h, kill).unwrap().value().data().iter().all(|&v| v == 0.5));
        let affine = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -3.0]).unwrap());
        let y = film_modulate(h, affine).unwrap().value();
        let expect: Vec<f64> = (1..=8).map(|v| 2.0 * v as f64 - 3.0).collect();
        assert_eq!(y.data(), &expect[..]);
    }

    #[test]
    fn time_embedding_properties() {
        let e0 = time_embedding(0.0, 16);
        assert_eq!(e0.numel(), 16);
        assert!(e0.data()[..8].iter().all(|&v| v == 0.0));
        let rows: Vec<Tensor> = (0..=1000).map(|i| time_embedding(i as f64 * 1e-3, 16)).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert!(rows[i].max_abs_diff(&rows[j]) > 0.0);
            }
        }
    }

    #[test]
    fn null_embedding_used_without_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = small_cfg();
        cfg.cond_dim = 3;
        let net = UNet::new(cfg, &mut rng).unwrap();
        let lt = Tensor::randn(vec![4, 6, 6, 6], 1.0, &mut rng);
        let z = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let d = net.denoiser(&z);
        let (a, _) = d.predict(&lt, 0.5, None).unwrap();
        let (b, _) = d.predict(&lt, 0.5, Some(&Tensor::zeros(vec![3]))).unwrap();
        // The null embedding starts at zero, so both paths agree initially.
        assert_eq!(a, b);
        let (c, _) = d.predict(&lt, 0.5, Some(&Tensor::ones(vec![3]))).unwrap();
        assert!(a.max_abs_diff(&c) > 0.0);
    }
}

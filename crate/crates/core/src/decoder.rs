//! Part-aware shape decoder: the part code attends into the reconstructed
//! field (cross-attention, then self-attention over voxel tokens) and two
//! point-wise heads predict colour and part probabilities.

use std::path::Path;

use rand::Rng;
use voxpart_autodiff::{checkpoint, AttentionLayout, BoundParams, ParamId, ParamSet, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::field::world_to_grid;
use crate::geom::Vec3;
use crate::nn::Linear;
use crate::render::{composite_weights, sample_density, RayBatch, Rendered};

pub const PREFIX: &str = "decoder.";
/// Frequencies in the view-direction encoding.
pub const DIR_FREQS: usize = 4;
/// Width of the view-direction encoding.
pub const DIR_ENC: usize = 3 + 6 * DIR_FREQS;
/// Weight of the part-code norm penalty.
pub const PART_CODE_WEIGHT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub field_channels: usize,
    pub parts: usize,
    pub width: usize,
    pub heads: usize,
    /// Self-attention window edge in voxels; 0 attends over all tokens.
    pub window: usize,
    pub hidden: usize,
}

struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attn {
    fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, d: usize, rng: &mut R) -> Self {
        let mut lin = |n: &str| Linear::new(ps, &format!("{name}.{n}"), d, d, false, rng);
        Attn {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
        }
    }
}

pub struct PartDecoder {
    pub cfg: DecoderConfig,
    pub params: ParamSet,
    part_code: ParamId,
    shift: ParamId,
    scale: ParamId,
    proj: Linear,
    cross: Attn,
    selfa: Attn,
    color_f: Linear,
    color_d: Linear,
    color_z: Linear,
    color_out: Linear,
    part_f: Linear,
    part_z: Linear,
    part_out: Linear,
}

impl PartDecoder {
    pub fn new<R: Rng + ?Sized>(cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.parts < 2 || cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(Error::Config("decoder needs K >= 2 and D divisible by the head count".into()));
        }
        let mut ps = ParamSet::new();
        let p = |n: &str| format!("{PREFIX}{n}");
        let (d, h) = (cfg.width, cfg.hidden);
        let part_code = ps.insert(p("part_code"), Tensor::randn(vec![cfg.parts, d], 1.0, rng));
        let shift = ps.insert(p("norm.shift"), Tensor::zeros(vec![cfg.field_channels]));
        let scale = ps.insert(p("norm.scale"), Tensor::ones(vec![cfg.field_channels]));
        let proj = Linear::new(&mut ps, &p("proj"), cfg.field_channels, d, true, rng);
        let cross = Attn::new(&mut ps, &p("cross"), d, rng);
        let selfa = Attn::new(&mut ps, &p("self"), d, rng);
        Ok(PartDecoder {
            color_f: Linear::new(&mut ps, &p("color.feat"), d, h, true, rng),
            color_d: Linear::new(&mut ps, &p("color.dir"), DIR_ENC, h, false, rng),
            color_z: Linear::new(&mut ps, &p("color.code"), d, h, false, rng),
            color_out: Linear::new(&mut ps, &p("color.out"), h, 3, true, rng),
            part_f: Linear::new(&mut ps, &p("part.feat"), d, h, true, rng),
            part_z: Linear::new(&mut ps, &p("part.code"), d, h, false, rng),
            part_out: Linear::new(&mut ps, &p("part.out"), h, cfg.parts, true, rng),
            cfg,
            params: ps,
            part_code,
            shift,
            scale,
            proj,
            cross,
            selfa,
        })
    }

    pub fn part_code_id(&self) -> ParamId {
        self.part_code
    }

    pub fn part_code(&self) -> &Tensor {
        self.params.get(self.part_code)
    }

    /// Ids of fixed buffers that must never receive updates.
    pub fn frozen_ids(&self) -> [ParamId; 2] {
        [self.shift, self.scale]
    }

    /// Input standardisation for the channel projection.
    pub fn set_normalization(&mut self, shift: &Tensor, scale: &Tensor) {
        *self.params.get_mut(self.shift) = shift.clone();
        *self.params.get_mut(self.scale) = scale.clone();
    }

    /// Refined features `[D, X, Y, Z]` from `field_hat [C_v, X, Y, Z]`.
    pub fn refine<'t>(&self, p: &BoundParams<'t>, field_hat: Var<'t>) -> Result<Var<'t>> {
        let s = field_hat.shape();
        if s.len() != 4 || s[0] != self.cfg.field_channels {
            return Err(Error::invalid(format!("decoder input {s:?} has wrong channels")));
        }
        let dims = [s[1], s[2], s[3]];
        let n: usize = dims.iter().product();
        let tape = field_hat.tape();
        let shift = self.params.get(self.shift).map(|v| -v);
        let inv = self.params.get(self.scale).map(|v| 1.0 / v);
        let normed = field_hat.add_channel(tape.constant(shift))?.mul_channel(tape.constant(inv))?;
        let tokens = normed.reshape(&[s[0], n])?.t()?;
        let x0 = self.proj.forward(p, tokens)?;
        let z = p[self.part_code];
        let heads = self.cfg.heads;

        let q = self.cross.q.forward(p, x0)?;
        let k = self.cross.k.forward(p, z)?;
        let v = self.cross.v.forward(p, z)?;
        let a = q.attention(k, v, heads, AttentionLayout::Full)?;
        let x1 = x0.add(self.cross.o.forward(p, a)?)?;

        let (perm, layout) = window_order(dims, self.cfg.window)?;
        let xw = match &perm {
            Some((fwd, _)) => x1.gather_rows(fwd)?,
            None => x1,
        };
        let q = self.selfa.q.forward(p, xw)?;
        let k = self.selfa.k.forward(p, xw)?;
        let v = self.selfa.v.forward(p, xw)?;
        let a = self.selfa.o.forward(p, q.attention(k, v, heads, layout)?)?;
        let a = match &perm {
            Some((_, inv)) => a.gather_rows(inv)?,
            None => a,
        };
        let x2 = x1.add(a)?;
        Ok(x2.t()?.reshape(&[self.cfg.width, dims[0], dims[1], dims[2]])?)
    }

    /// Mean over the K rows of the part code, `[1, D]`.
    fn pooled_code<'t>(&self, p: &BoundParams<'t>) -> Result<Var<'t>> {
        let z = p[self.part_code];
        let k = self.cfg.parts;
        let avg = z.tape().constant(Tensor::full(vec![1, k], 1.0 / k as f64));
        Ok(avg.matmul(z)?)
    }

    /// Colours in `(0, 1)` for point features `[N, D]` and encoded
    /// directions `[N, DIR_ENC]`.
    pub fn color_head<'t>(&self, p: &BoundParams<'t>, feats: Var<'t>, dirs: &Tensor) -> Result<Var<'t>> {
        let tape = feats.tape();
        let zc = self.color_z.forward(p, self.pooled_code(p)?)?.reshape(&[self.cfg.hidden])?;
        let h = self
            .color_f
            .forward(p, feats)?
            .add(self.color_d.forward(p, tape.constant(dirs.clone()))?)?
            .add_broadcast(zc)?
            .silu();
        Ok(self.color_out.forward(p, h)?.sigmoid())
    }

    /// Part logits `[N, K]` for point features `[N, D]`.
    pub fn part_logits<'t>(&self, p: &BoundParams<'t>, feats: Var<'t>) -> Result<Var<'t>> {
        let zc = self.part_z.forward(p, self.pooled_code(p)?)?.reshape(&[self.cfg.hidden])?;
        let h = self.part_f.forward(p, feats)?.add_broadcast(zc)?.silu();
        self.part_out.forward(p, h)
    }

    /// Decoder-mode rendering: density from `field_hat`, colour and parts
    /// from the refined features.
    pub fn render<'t>(
        &self,
        p: &BoundParams<'t>,
        field_hat: Var<'t>,
        refined: Var<'t>,
        batch: &RayBatch,
        shift: f64,
    ) -> Result<Rendered<'t>> {
        let sigma = sample_density(field_hat, batch, shift)?;
        let feats = refined.trilinear_sample(&batch.coords)?;
        let rgb = self.color_head(p, feats, &encode_directions(&batch.dirs))?;
        let part = self.part_logits(p, feats)?.softmax();
        let w = composite_weights(sigma, &batch.deltas)?;
        Ok(Rendered {
            rgb: w.segment_weighted_sum(rgb)?,
            acc: w.sum_last(),
            part: Some(w.segment_weighted_sum(part)?),
        })
    }

    /// Colour at world position `x` seen along unit direction `d`.
    pub fn point_color<'t>(&self, p: &BoundParams<'t>, refined: Var<'t>, x: Vec3, d: Vec3) -> Result<Var<'t>> {
        if (d.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("view direction must be a unit vector"));
        }
        let feats = self.point_features(refined, x)?;
        let dirs = Tensor::new(vec![1, 3], d.0.to_vec())?;
        self.color_head(p, feats, &encode_directions(&dirs))
    }

    /// Part probabilities `[1, K]` at world position `x`.
    pub fn point_part_prob<'t>(&self, p: &BoundParams<'t>, refined: Var<'t>, x: Vec3) -> Result<Var<'t>> {
        let feats = self.point_features(refined, x)?;
        Ok(self.part_logits(p, feats)?.softmax())
    }

    fn point_features<'t>(&self, refined: Var<'t>, x: Vec3) -> Result<Var<'t>> {
        let s = refined.shape();
        let g = world_to_grid([s[1], s[2], s[3]], x);
        Ok(refined.trilinear_sample(&Tensor::new(vec![1, 3], g.to_vec())?)?)
    }

    /// Part probabilities `[X*Y*Z, K]` at every grid node of `field_hat`.
    pub fn node_part_probs(&self, field_hat: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let refined = self.refine(&p, tape.constant(field_hat.clone()))?;
        let s = refined.shape();
        let feats = refined.reshape(&[s[0], s[1] * s[2] * s[3]])?.t()?;
        let probs = self.part_logits(&p, feats)?.softmax();
        let out = (*probs.value()).clone();
        Ok(out)
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

/// `1e-4 * ||z||_2` over the flattened code.
pub fn part_code_penalty(z: Var<'_>) -> Var<'_> {
    z.square().sum().sqrt().scale(PART_CODE_WEIGHT)
}

/// `[d, sin(2^k pi d), cos(2^k pi d)]` for `k < DIR_FREQS`, per row of `[N, 3]`.
pub fn encode_directions(dirs: &Tensor) -> Tensor {
    let n = dirs.shape()[0];
    let mut out = Vec::with_capacity(n * DIR_ENC);
    for d in dirs.data().chunks(3) {
        out.extend_from_slice(d);
        for k in 0..DIR_FREQS {
            let f = std::f64::consts::PI * (1 << k) as f64;
            out.extend(d.iter().map(|v| (f * v).sin()));
            out.extend(d.iter().map(|v| (f * v).cos()));
        }
    }
    Tensor::new(vec![n, DIR_ENC], out).expect("encoding size")
}

type Permutation = Option<(Vec<usize>, Vec<usize>)>;

/// Token order grouping each `w^3` window contiguously, with its inverse.
fn window_order(dims: [usize; 3], w: usize) -> Result<(Permutation, AttentionLayout)> {
    if w == 0 || dims == [w; 3] {
        return Ok((None, AttentionLayout::Full));
    }
    if dims.iter().any(|&d| d % w != 0) {
        return Err(Error::Config(format!(
            "self-attention window {w} does not tile the grid {dims:?}"
        )));
    }
    let [nx, ny, nz] = dims;
    let mut fwd = Vec::with_capacity(nx * ny * nz);
    for bx in 0..nx / w {
        for by in 0..ny / w {
            for bz in 0..nz / w {
                for i in 0..w {
                    for j in 0..w {
                        for k in 0..w {
                            fwd.push(((bx * w + i) * ny + by * w + j) * nz + bz * w + k);
                        }
                    }
                }
            }
        }
    }
    let mut inv = vec![0; fwd.len()];
    for (new, &old) in fwd.iter().enumerate() {
        inv[old] = new;
    }
    Ok((Some((fwd, inv)), AttentionLayout::Blocked(w * w * w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DecoderConfig {
        DecoderConfig {
            field_channels: 4,
            parts: 3,
            width: 4,
            heads: 2,
            window: 2,
            hidden: 5,
        }
    }

    fn zero(dec: &mut PartDecoder, names: &[&str]) {
        for n in names {
            let id = dec.params.id_of(&format!("{PREFIX}{n}")).unwrap();
            let s = dec.params.get(id).shape().to_vec();
            *dec.params.get_mut(id) = Tensor::zeros(s);
        }
    }

    #[test]
    fn window_permutation_is_a_bijection() {
        let (perm, layout) = window_order([4, 2, 6], 2).unwrap();
        let (fwd, inv) = perm.unwrap();
        assert_eq!(layout, AttentionLayout::Blocked(8));
        let mut sorted = fwd.clone();
        sorted.sort();
        assert_eq!(sorted, (0..48).collect::<Vec<_>>());
        assert!(fwd.iter().enumerate().all(|(n, &o)| inv[o] == n));
        // First window is the 2x2x2 corner block.
        assert_eq!(&fwd[..8], &[0, 1, 6, 7, 12, 13, 18, 19]);
        assert!(window_order([5, 4, 4], 2).is_err());
        assert_eq!(window_order([4, 4, 4], 0).unwrap().1, AttentionLayout::Full);
    }

    #[test]
    fn zeroed_attention_reduces_to_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dec = PartDecoder::new(cfg(), &mut rng).unwrap();
        zero(&mut dec, &["cross.o.w", "self.o.w"]);
        let field = Tensor::randn(vec![4, 2, 2, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let p = dec.params.bind_frozen(&tape);
        let refined = dec.refine(&p, tape.constant(field.clone())).unwrap().value();
        let w = dec.params.by_name("decoder.proj.w").unwrap();
        let b = dec.params.by_name("decoder.proj.b").unwrap();
        for tok in 0..16 {
            for o in 0..4 {
                let mut e = b.data()[o];
                for c in 0..4 {
                    e += field.data()[c * 16 + tok] * w.data()[c * 4 + o];
                }
                assert!((refined.data()[o * 16 + tok] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dec = PartDecoder::new(cfg(), &mut rng).unwrap();
        zero(&mut dec, &["cross.q.w", "cross.k.w", "self.o.w"]);
        let field = Tensor::randn(vec![4, 2, 2, 2], 1.0, &mut rng);
        let tape = Tape::new();
        let p = dec.params.bind_frozen(&tape);
        let x0 = dec
            .proj
            .forward(&p, tape.constant(field.reshape(vec![4, 8]).unwrap()).t().unwrap())
            .unwrap();
        let refined = dec.refine(&p, tape.constant(field)).unwrap();
        // Every token adds o(mean_k v_k): the same vector.
        let z = dec.part_code();
        let wv = dec.params.by_name("decoder.cross.v.w").unwrap();
        let wo = dec.params.by_name("decoder.cross.o.w").unwrap();
        let mut mean_v = vec![0.0; 4];
        for k in 0..3 {
            for o in 0..4 {
                mean_v[o] += (0..4).map(|c| z.data()[k * 4 + c] * wv.data()[c * 4 + o]).sum::<f64>() / 3.0;
            }
        }
        let add: Vec<f64> = (0..4).map(|o| (0..4).map(|c| mean_v[c] * wo.data()[c * 4 + o]).sum()).collect();
        let r = refined.value();
        let x0 = x0.value();
        for tok in 0..8 {
            for o in 0..4 {
                assert!((r.data()[o * 8 + tok] - x0.data()[tok * 4 + o] - add[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_ranges_and_view_dependence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = PartDecoder::new(cfg(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = dec.params.bind_frozen(&tape);
        let refined = tape.constant(Tensor::randn(vec![4, 3, 3, 3], 1.0, &mut rng));
        let x = Vec3::new(0.1, -0.2, 0.3);
        let a = dec.point_color(&p, refined, x, Vec3::new(0.0, 0.0, 1.0)).unwrap().value();
        let b = dec.point_color(&p, refined, x, Vec3::new(0.6, 0.0, 0.8)).unwrap().value();
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(a.max_abs_diff(&b) > 0.0);
        assert!(dec.point_color(&p, refined, x, Vec3::new(0.0, 0.0, 2.0)).is_err());
        let pp = dec.point_part_prob(&p, refined, x).unwrap().value();
        assert!((pp.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zeroed_part_head_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dec = PartDecoder::new(cfg(), &mut rng).unwrap();
        zero(&mut dec, &["part.out.w", "part.out.b"]);
        let probs = dec.node_part_probs(&Tensor::randn(vec![4, 2, 2, 2], 1.0, &mut rng)).unwrap();
        assert!(probs.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn penalty_values() {
        let tape = Tape::new();
        assert_eq!(part_code_penalty(tape.constant(Tensor::zeros(vec![2, 2]))).item(), 0.0);
        let z = tape.constant(Tensor::new(vec![2, 2], vec![6.0, 0.0, 0.0, 8.0]).unwrap());
        assert!((part_code_penalty(z).item() - 1e-3).abs() < 1e-15);
    }
}

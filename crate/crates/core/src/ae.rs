//! Variational 3D autoencoder between fields `[C_v, X, Y, Z]` and latents
//! `[C_l, X/4, Y/4, Z/4]`.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use voxpart_autodiff::{checkpoint, BoundParams, ParamId, ParamSet, Tape, Tensor, Var};

use crate::diffusion::standard_normal;
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::optim::Optimizer;

pub const PREFIX: &str = "ae.";
/// Spatial reduction per axis between field and latent.
pub const STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeConfig {
    pub field_channels: usize,
    pub latent_channels: usize,
    pub width: usize,
}

/// Encoder outputs; `latent` equals `mean` unless sampling was requested.
#[derive(Clone, Copy)]
pub struct Encoded<'t> {
    pub latent: Var<'t>,
    pub mean: Var<'t>,
    pub logvar: Var<'t>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeLoss {
    pub recon: f64,
    pub kl: f64,
}

pub struct Autoencoder {
    pub cfg: AeConfig,
    pub params: ParamSet,
    enc: [Conv; 3],
    head: Conv,
    dec: [Conv; 3],
    out: Conv,
    shift: ParamId,
    scale: ParamId,
    decoder_backward_calls: Arc<AtomicUsize>,
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(cfg: AeConfig, rng: &mut R) -> Self {
        let mut ps = ParamSet::new();
        let (c, l, w) = (cfg.field_channels, cfg.latent_channels, cfg.width);
        let p = |n: &str| format!("{PREFIX}{n}");
        let enc = [
            Conv::new(&mut ps, &p("enc0"), c, w, 3, 1, rng),
            Conv::new(&mut ps, &p("enc1"), w, 2 * w, 3, 2, rng),
            Conv::new(&mut ps, &p("enc2"), 2 * w, 2 * w, 3, 2, rng),
        ];
        let head = Conv::new(&mut ps, &p("head"), 2 * w, 2 * l, 3, 1, rng);
        let dec = [
            Conv::new(&mut ps, &p("dec0"), l, 2 * w, 3, 1, rng),
            Conv::new(&mut ps, &p("dec1"), 2 * w, w, 3, 1, rng),
            Conv::new(&mut ps, &p("dec2"), w, w, 3, 1, rng),
        ];
        let out = Conv::new(&mut ps, &p("out"), w, c, 3, 1, rng);
        let shift = ps.insert(p("norm.shift"), Tensor::zeros(vec![c]));
        let scale = ps.insert(p("norm.scale"), Tensor::ones(vec![c]));
        Autoencoder {
            cfg,
            params: ps,
            enc,
            head,
            dec,
            out,
            shift,
            scale,
            decoder_backward_calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// How many times the decoder's backward rule has run.
    pub fn decoder_backward_calls(&self) -> usize {
        self.decoder_backward_calls.load(Ordering::SeqCst)
    }

    /// Sets the per-channel input standardisation from a set of fields.
    pub fn fit_normalization(&mut self, fields: &[&Tensor]) -> Result<()> {
        let c = self.cfg.field_channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0.0;
        for f in fields {
            if f.shape()[0] != c {
                return Err(Error::invalid("field channel count differs from the autoencoder"));
            }
            let vol = f.numel() / c;
            for ch in 0..c {
                for v in &f.data()[ch * vol..(ch + 1) * vol] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            n += vol as f64;
        }
        if n == 0.0 {
            return Err(Error::invalid("no fields to normalise"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        *self.params.get_mut(self.shift) = Tensor::from_slice(&mean);
        *self.params.get_mut(self.scale) = Tensor::from_slice(&std);
        Ok(())
    }

    pub fn latent_dims(&self, field_dims: [usize; 3]) -> Result<[usize; 3]> {
        if field_dims.iter().any(|d| d % STRIDE != 0 || *d == 0) {
            return Err(Error::invalid(format!(
                "field extents {field_dims:?} must be divisible by {STRIDE}"
            )));
        }
        Ok(field_dims.map(|d| d / STRIDE))
    }

    fn norm_consts<'t>(&self, tape: &'t Tape) -> (Var<'t>, Var<'t>, Var<'t>, Var<'t>) {
        let shift = self.params.get(self.shift);
        let scale = self.params.get(self.scale);
        (
            tape.constant(shift.map(|v| -v)),
            tape.constant(scale.map(|v| 1.0 / v)),
            tape.constant(scale.clone()),
            tape.constant(shift.clone()),
        )
    }

    pub fn encode<'t, R: Rng + ?Sized>(
        &self,
        p: &BoundParams<'t>,
        field: Var<'t>,
        sample: bool,
        rng: &mut R,
    ) -> Result<Encoded<'t>> {
        let s = field.shape();
        if s.len() != 4 || s[0] != self.cfg.field_channels {
            return Err(Error::invalid(format!("autoencoder input {s:?} has wrong channels")));
        }
        self.latent_dims([s[1], s[2], s[3]])?;
        let tape = field.tape();
        let (neg_shift, inv_scale, _, _) = self.norm_consts(tape);
        let mut h = field.add_channel(neg_shift)?.mul_channel(inv_scale)?;
        for conv in &self.enc {
            h = conv.forward(p, h)?.silu();
        }
        let o = self.head.forward(p, h)?;
        let l = self.cfg.latent_channels;
        let mean = o.narrow(0, 0, l)?;
        let logvar = o.narrow(0, l, l)?;
        let latent = if sample {
            let n = standard_normal(&mean.shape(), rng);
            logvar.scale(0.5).exp().mul(tape.constant(n))?.add(mean)?
        } else {
            mean
        };
        Ok(Encoded { latent, mean, logvar })
    }

    pub fn decode<'t>(&self, p: &BoundParams<'t>, latent: Var<'t>) -> Result<Var<'t>> {
        let s = latent.shape();
        if s.len() != 4 || s[0] != self.cfg.latent_channels {
            return Err(Error::invalid(format!("latent {s:?} has wrong channels")));
        }
        let tape = latent.tape();
        let counter = Arc::clone(&self.decoder_backward_calls);
        // Identity marker: its backward runs iff gradients flow through the decoder.
        let latent = tape.custom(&[latent], (*latent.value()).clone(), move |g, _| {
            counter.fetch_add(1, Ordering::SeqCst);
            vec![Some(g.clone())]
        });
        let mid = [s[1] * 2, s[2] * 2, s[3] * 2];
        let full = [s[1] * STRIDE, s[2] * STRIDE, s[3] * STRIDE];
        let mut h = self.dec[0].forward(p, latent)?.silu();
        h = h.resize_trilinear(mid)?;
        h = self.dec[1].forward(p, h)?.silu();
        h = h.resize_trilinear(full)?;
        h = self.dec[2].forward(p, h)?.silu();
        let (_, _, scale, shift) = self.norm_consts(tape);
        Ok(self.out.forward(p, h)?.mul_channel(scale)?.add_channel(shift)?)
    }

    /// Deterministic encoding (the posterior mean) without gradients.
    pub fn encode_mean(&self, field: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let e = self.encode(&p, tape.constant(field.clone()), false, &mut rng)?;
        Ok((*e.mean.value()).clone())
    }

    /// Decoding without gradients.
    pub fn decode_tensor(&self, latent: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.decode(&p, tape.constant(latent.clone()))?;
        Ok((*out.value()).clone())
    }

    /// Reconstruction MSE plus `beta` times the KL term for one field.
    pub fn loss<'t, R: Rng + ?Sized>(
        &self,
        p: &BoundParams<'t>,
        field: &Tensor,
        beta: f64,
        rng: &mut R,
    ) -> Result<(Var<'t>, AeLoss)> {
        let tape = p.vars()[0].tape();
        let x = tape.constant(field.clone());
        let e = self.encode(p, x, true, rng)?;
        let recon = self.decode(p, e.latent)?.mse(x)?;
        let kl = kl_loss(e.mean, e.logvar)?;
        let report = AeLoss {
            recon: recon.item(),
            kl: kl.item(),
        };
        Ok((recon.add(kl.scale(beta))?, report))
    }

    /// One optimizer step over a batch of fields (gradients averaged).
    pub fn pretrain_step<R: Rng + ?Sized>(
        &mut self,
        fields: &[&Tensor],
        beta: f64,
        opt: &mut dyn Optimizer,
        rng: &mut R,
    ) -> Result<AeLoss> {
        let mut total: Option<Vec<Option<Tensor>>> = None;
        let mut report = AeLoss { recon: 0.0, kl: 0.0 };
        let n = fields.len() as f64;
        for f in fields {
            let tape = Tape::new();
            let p = self.params.bind(&tape);
            let (loss, r) = self.loss(&p, f, beta, rng)?;
            if !loss.item().is_finite() {
                return Err(Error::Numeric("autoencoder loss is not finite".into()));
            }
            report.recon += r.recon / n;
            report.kl += r.kl / n;
            let grads = p.grads(&tape.backward(loss)?);
            total = Some(match total {
                None => grads,
                Some(acc) => acc
                    .into_iter()
                    .zip(grads)
                    .map(|(a, g)| match (a, g) {
                        (Some(mut a), Some(g)) => {
                            a.axpy(1.0, &g);
                            Some(a)
                        }
                        (a, g) => a.or(g),
                    })
                    .collect(),
            });
        }
        let mut grads = total.ok_or_else(|| Error::invalid("empty autoencoder batch"))?;
        for g in grads.iter_mut().flatten() {
            *g = g.scale(1.0 / n);
        }
        grads[self.shift.index()] = None;
        grads[self.scale.index()] = None;
        opt.step(&mut self.params, &grads)?;
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    /// Loads `ae.*` tensors from a checkpoint that may hold other prefixes.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        Ok(self.params.load_named(named)?)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_named(&checkpoint::load(path)?)
    }
}

/// `0.5 * mean(mean^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_loss<'t>(mean: Var<'t>, logvar: Var<'t>) -> Result<Var<'t>> {
    Ok(mean
        .square()
        .add(logvar.exp())?
        .sub(logvar)?
        .add_scalar(-1.0)
        .mean()
        .scale(0.5))
}

/// PSNR of a reconstruction in the units of the reference, with the peak
/// taken as the reference's value range.
pub fn range_psnr(reference: &[f64], recon: &[f64]) -> Result<f64> {
    if reference.len() != recon.len() || reference.is_empty() {
        return Err(Error::invalid("psnr inputs differ in size"));
    }
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mse = reference.iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / reference.len() as f64;
    Ok(10.0 * ((hi - lo).powi(2) / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(rng: &mut ChaCha8Rng) -> Autoencoder {
        Autoencoder::new(
            AeConfig {
                field_channels: 4,
                latent_channels: 4,
                width: 2,
            },
            rng,
        )
    }

    #[test]
    fn shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ae = tiny(&mut rng);
        let f = Tensor::randn(vec![4, 8, 8, 8], 1.0, &mut rng);
        let l = ae.encode_mean(&f).unwrap();
        assert_eq!(l.shape(), &[4, 2, 2, 2]);
        assert_eq!(l, ae.encode_mean(&f).unwrap());
        assert_eq!(ae.decode_tensor(&l).unwrap().shape(), f.shape());
        assert!(ae.decode_tensor(&Tensor::zeros(vec![4, 2, 2, 2])).unwrap().all_finite());
        assert!(ae.encode_mean(&Tensor::zeros(vec![4, 6, 8, 8])).is_err());
    }

    #[test]
    fn kl_values() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![3]));
        assert_eq!(kl_loss(z, z).unwrap().item(), 0.0);
        let one = tape.constant(Tensor::ones(vec![3]));
        assert!((kl_loss(one, z).unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn vanishing_variance_sample_is_the_mean() {
        let tape = Tape::new();
        let mean = tape.constant(Tensor::from_slice(&[0.3, -0.2]));
        let logvar = tape.constant(Tensor::full(vec![2], -200.0));
        let n = tape.constant(Tensor::from_slice(&[1.7, -0.4]));
        let s = logvar.scale(0.5).exp().mul(n).unwrap().add(mean).unwrap();
        assert_eq!(*s.value(), *mean.value());
    }

    #[test]
    fn decoder_marker_counts_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ae = tiny(&mut rng);
        let tape = Tape::new();
        let p = ae.params.bind_frozen(&tape);
        let l = tape.leaf(Tensor::randn(vec![4, 1, 1, 1], 1.0, &mut rng));
        let y = ae.decode(&p, l).unwrap().sum();
        assert_eq!(ae.decoder_backward_calls(), 0);
        tape.backward(y).unwrap();
        assert_eq!(ae.decoder_backward_calls(), 1);
        ae.decode_tensor(&Tensor::zeros(vec![4, 1, 1, 1])).unwrap();
        assert_eq!(ae.decoder_backward_calls(), 1);
    }

    #[test]
    fn range_psnr_definition() {
        let r = [0.0, 10.0];
        let p = range_psnr(&r, &[1.0, 9.0]).unwrap();
        assert!((p - 20.0).abs() < 1e-12);
    }
}

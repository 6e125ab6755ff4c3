use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use voxpart_autodiff::{Tape, Tensor};

use crate::ae::{kl_loss, range_psnr, AeLoss, Autoencoder};
use crate::camera::Ray;
use crate::config::RunConfig;
use crate::decoder::{part_code_penalty, PART_CODE_WEIGHT};
use crate::diffusion::{diffusion_loss, draw_training_time, forward_sample, lambda_t, standard_normal};
use crate::error::{Error, Result};
use crate::field::{tv_loss, FieldBundle};
use crate::optim::{self, OptimConfig, Optimizer};
use crate::render::{hit_pixels, rendering_loss, RayBatch};
use crate::synth::ObjectViews;

use super::model::Model;
use super::skip::{alignment_registry, skip_gradient, GradientAlignment};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub warmup_iters: usize,
    pub rays_per_step: usize,
    pub views_per_step: usize,
    pub samples: usize,
    pub optimizer: String,
    pub lr_unet: f64,
    pub lr_decoder: f64,
    pub tv_weight: f64,
    pub z_weight: f64,
    pub t_min: f64,
    pub cond_drop: f64,
    pub skip_alignment: String,
}

impl TrainConfig {
    pub fn from_config(c: &RunConfig) -> Result<Self> {
        let cfg = TrainConfig {
            iterations: c.get("train.iterations")?,
            warmup_iters: c.get("train.warmup_iters")?,
            rays_per_step: c.get("train.rays_per_step")?,
            views_per_step: c.get("train.views_per_step")?,
            samples: c.get("render.samples")?,
            optimizer: c.raw("train.optimizer")?.to_string(),
            lr_unet: c.get("train.lr_unet")?,
            lr_decoder: c.get("train.lr_decoder")?,
            tv_weight: c.get("train.tv_weight")?,
            z_weight: c.get("train.z_weight")?,
            t_min: c.get("diffusion.t_min")?,
            cond_drop: c.get("unet.cond_drop")?,
            skip_alignment: c.raw("train.skip_alignment")?.to_string(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters >= self.iterations {
            return Err(Error::Config(format!(
                "train.warmup_iters ({}) must be below train.iterations ({})",
                self.warmup_iters, self.iterations
            )));
        }
        if !(self.lr_unet > 0.0 && self.lr_decoder > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) || !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config("cond_drop must lie in [0, 1] and t_min in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-step losses of joint training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub t: f64,
    pub lambda: f64,
    pub diff: f64,
    pub rend: f64,
    pub tv: f64,
    pub kl: f64,
    pub z_penalty: f64,
    pub total: f64,
    /// Norm of the gradient applied to the decoder; zero during warm-up.
    pub decoder_grad_norm: f64,
}

pub fn loss_csv_header() -> &'static str {
    "step,t,lambda,diff_loss,rend_loss,tv_loss,kl_loss,z_penalty,total,decoder_grad_norm"
}

impl LossReport {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step,
            self.t,
            self.lambda,
            self.diff,
            self.rend,
            self.tv,
            self.kl,
            self.z_penalty,
            self.total,
            self.decoder_grad_norm
        );
        s
    }
}

/// A training object: its fitted field, frozen latent and supervision.
pub struct TrainObject {
    pub name: String,
    pub field: Tensor,
    /// Posterior mean of the frozen autoencoder.
    pub latent: Tensor,
    pub kl: f64,
    pub views: ObjectViews,
    /// Optional conditioning embedding.
    pub embedding: Option<Tensor>,
    rays: Vec<Vec<(usize, Ray)>>,
    labels: Vec<Vec<usize>>,
}

impl TrainObject {
    /// Encodes the field with the (frozen) autoencoder and indexes the views.
    pub fn new(model: &Model, name: &str, field: &FieldBundle, views: ObjectViews, embedding: Option<Tensor>) -> Result<Self> {
        let grid = field.grid();
        if field.dims() != model.cfg.field_dims() {
            return Err(Error::Data(format!(
                "{name}: field extents {:?} differ from the model's {:?}",
                field.dims(),
                model.cfg.field_dims()
            )));
        }
        let tape = Tape::new();
        let p = model.ae.params.bind_frozen(&tape);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let e = model.ae.encode(&p, tape.constant(grid.clone()), false, &mut rng)?;
        let kl = kl_loss(e.mean, e.logvar)?.item();
        let latent = (*e.mean.value()).clone();
        let k = model.cfg.parts;
        let labels = views.parts.iter().map(|m| m.class_indices(k)).collect::<Result<Vec<_>>>()?;
        let rays = views.cameras.iter().map(hit_pixels).collect();
        Ok(TrainObject {
            name: name.to_string(),
            field: grid,
            latent,
            kl,
            views,
            embedding,
            rays,
            labels,
        })
    }

    /// Rays from `n_views` distinct views with colour and part targets.
    fn draw<R: Rng + ?Sized>(&self, n_views: usize, n_rays: usize, rng: &mut R) -> Result<(Vec<Ray>, Tensor, Vec<usize>)> {
        let total = self.views.cameras.len();
        let chosen = sample_indices(rng, total, n_views.clamp(1, total)).into_vec();
        let pool: Vec<(usize, usize, Ray)> = chosen
            .iter()
            .flat_map(|&v| self.rays[v].iter().map(move |&(p, r)| (v, p, r)))
            .collect();
        if pool.is_empty() {
            return Err(Error::Data(format!("{}: sampled views have no rays in bounds", self.name)));
        }
        let mut rays = Vec::with_capacity(n_rays);
        let mut rgb = Vec::with_capacity(3 * n_rays);
        let mut labels = Vec::with_capacity(n_rays);
        for _ in 0..n_rays {
            let (v, p, r) = pool[rng.gen_range(0..pool.len())];
            rays.push(r);
            rgb.extend_from_slice(&self.views.images[v].data[3 * p..3 * p + 3]);
            labels.push(self.labels[v][p]);
        }
        Ok((rays, Tensor::new(vec![n_rays, 3], rgb)?, labels))
    }
}

/// Per-channel mean and standard deviation over a set of `[C, ...]` grids.
pub(crate) fn channel_stats(fields: &[&Tensor]) -> Result<(Tensor, Tensor)> {
    let c = fields.first().ok_or_else(|| Error::invalid("no fields"))?.shape()[0];
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut n = 0.0;
    for f in fields {
        let vol = f.numel() / c;
        for ch in 0..c {
            for v in &f.data()[ch * vol..(ch + 1) * vol] {
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
        n += vol as f64;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sq.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-3)).collect();
    Ok((Tensor::from_slice(&mean), Tensor::from_slice(&std)))
}

/// Joint denoiser and decoder training over a fixed set of objects.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub objects: Vec<TrainObject>,
    opt_unet: Box<dyn Optimizer>,
    opt_decoder: Box<dyn Optimizer>,
    align: Box<dyn GradientAlignment>,
    step: usize,
}

impl Trainer {
    pub fn new(mut model: Model, objects: Vec<TrainObject>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if objects.is_empty() {
            return Err(Error::Data("joint training needs at least one object".into()));
        }
        let fields: Vec<&Tensor> = objects.iter().map(|o| &o.field).collect();
        let (shift, scale) = channel_stats(&fields)?;
        model.decoder.set_normalization(&shift, &scale);
        let opt_unet = optim::create(&cfg.optimizer, OptimConfig::with_lr(cfg.lr_unet))?;
        let opt_decoder = optim::create(&cfg.optimizer, OptimConfig::with_lr(cfg.lr_decoder))?;
        let align = alignment_registry().create(&cfg.skip_alignment, &())?;
        Ok(Trainer {
            cfg,
            model,
            objects,
            opt_unet,
            opt_decoder,
            align,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn in_warmup(&self) -> bool {
        self.step < self.cfg.warmup_iters
    }

    /// One joint update on a randomly drawn object.
    pub fn train_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<LossReport> {
        let cfg = &self.cfg;
        let Model { cfg: mcfg, ae, unet, decoder } = &mut self.model;
        let obj = &self.objects[rng.gen_range(0..self.objects.len())];
        let t = draw_training_time(rng, cfg.t_min);
        let lambda = lambda_t(t, cfg.t_min);
        let eps = standard_normal(obj.latent.shape(), rng);
        let lt = forward_sample(&obj.latent, t, &eps)?;
        let embedding = match &obj.embedding {
            Some(e) if rng.gen::<f64>() >= cfg.cond_drop => Some(e.clone()),
            _ => None,
        };
        let joint = self.step >= cfg.warmup_iters;

        let tape = Tape::new();
        let pu = unet.params.bind(&tape);
        let code = decoder.part_code().clone();
        let z = if joint { tape.leaf(code) } else { tape.constant(code) };
        let e = embedding.map(|e| tape.constant(e));
        let (l_pred, eps_pred) = unet.denoise(&pu, tape.constant(lt), t, z, e)?;
        let diff = diffusion_loss(l_pred, tape.constant(obj.latent.clone()), eps_pred, tape.constant(eps))?;
        let mut report = LossReport {
            step: self.step,
            t,
            lambda,
            diff: diff.item(),
            rend: 0.0,
            tv: 0.0,
            kl: obj.kl,
            z_penalty: 0.0,
            total: diff.item(),
            decoder_grad_norm: 0.0,
        };
        if !report.diff.is_finite() {
            return Err(Error::Numeric(format!("diffusion loss is not finite at step {}", self.step)));
        }

        let mut loss = diff;
        let mut decoder_grads = None;
        if joint {
            // The decoded field is a leaf: the rendering gradient stops at
            // it and reaches the latent prediction through the skip rule.
            let v_hat = ae.decode_tensor(&l_pred.value())?;
            let tape2 = Tape::new();
            let pd = decoder.params.bind(&tape2);
            let vh = tape2.leaf(v_hat);
            let refined = decoder.refine(&pd, vh)?;
            let (rays, rgb, labels) = obj.draw(cfg.views_per_step, cfg.rays_per_step, rng)?;
            let batch = RayBatch::new(&rays, cfg.samples, true, mcfg.field_dims(), rng)?;
            let rendered = decoder.render(&pd, vh, refined, &batch, mcfg.shift)?;
            let rend = rendering_loss(&rendered, &rgb, Some(&labels))?;
            let tv = tv_loss(vh)?;
            let zp = part_code_penalty(pd[decoder.part_code_id()]).scale(cfg.z_weight / PART_CODE_WEIGHT);
            let loss2 = rend.scale(lambda).add(tv.scale(cfg.tv_weight))?.add(zp)?;
            report.rend = rend.item();
            report.tv = tv.item();
            report.z_penalty = zp.item();
            report.total += loss2.item();
            if !report.total.is_finite() {
                return Err(Error::Numeric(format!("rendering loss is not finite at step {}", self.step)));
            }
            let g2 = tape2.backward(loss2)?;
            let g_field = g2.get(vh).cloned().unwrap_or_else(|| Tensor::zeros(vh.shape()));
            let g_latent = skip_gradient(self.align.as_ref(), &g_field, &l_pred.shape())?;
            loss = loss.add(l_pred.mul(tape.constant(g_latent))?.sum())?;
            decoder_grads = Some(pd.grads(&g2));
        }
        let g1 = tape.backward(loss)?;
        let unet_grads = pu.grads(&g1);
        if let Some(mut grads) = decoder_grads {
            let id = decoder.part_code_id().index();
            if let Some(gz) = g1.get(z) {
                match &mut grads[id] {
                    Some(g) => g.axpy(1.0, gz),
                    slot => *slot = Some(gz.clone()),
                }
            }
            for frozen in decoder.frozen_ids() {
                grads[frozen.index()] = None;
            }
            report.decoder_grad_norm = grads.iter().flatten().map(|g| g.sum_squares()).sum::<f64>().sqrt();
            self.opt_decoder.step(&mut decoder.params, &grads)?;
        }
        self.opt_unet.step(&mut unet.params, &unet_grads)?;
        self.step += 1;
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AePretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub beta: f64,
    pub lr: f64,
    pub optimizer: String,
}

impl AePretrainConfig {
    pub fn from_config(c: &RunConfig) -> Result<Self> {
        Ok(AePretrainConfig {
            steps: c.get("ae.steps")?,
            batch: c.get("ae.batch")?,
            beta: c.get("ae.beta")?,
            lr: c.get("ae.lr")?,
            optimizer: c.raw("train.optimizer")?.to_string(),
        })
    }
}

/// Fits the input normalisation, then trains the autoencoder on random
/// mini-batches. `on_step` sees every step's losses.
pub fn pretrain_autoencoder<R: Rng + ?Sized>(
    ae: &mut Autoencoder,
    fields: &[Tensor],
    cfg: &AePretrainConfig,
    rng: &mut R,
    mut on_step: impl FnMut(usize, &AeLoss),
) -> Result<Vec<AeLoss>> {
    if fields.is_empty() {
        return Err(Error::Data("autoencoder pretraining needs fields".into()));
    }
    let refs: Vec<&Tensor> = fields.iter().collect();
    ae.fit_normalization(&refs)?;
    let mut opt = optim::create(&cfg.optimizer, OptimConfig::with_lr(cfg.lr))?;
    let mut out = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        // Cosine decay to 5% of the base rate; single-field batches are noisy.
        let progress = step as f64 / cfg.steps as f64;
        opt.set_lr(cfg.lr * (0.05 + 0.475 * (1.0 + (std::f64::consts::PI * progress).cos())));
        let idx = sample_indices(rng, fields.len(), cfg.batch.clamp(1, fields.len())).into_vec();
        let batch: Vec<&Tensor> = idx.iter().map(|&i| &fields[i]).collect();
        let loss = ae.pretrain_step(&batch, cfg.beta, opt.as_mut(), rng)?;
        if !(loss.kl.is_finite() && loss.kl >= 0.0) {
            return Err(Error::Numeric(format!("KL term {} invalid at step {step}", loss.kl)));
        }
        on_step(step, &loss);
        out.push(loss);
    }
    Ok(out)
}

/// Range PSNR of the density channel after an encode/decode round trip.
pub fn reconstruction_psnr(ae: &Autoencoder, field: &Tensor) -> Result<f64> {
    let recon = ae.decode_tensor(&ae.encode_mean(field)?)?;
    let vol = field.numel() / field.shape()[0];
    range_psnr(&field.data()[..vol], &recon.data()[..vol])
}

//! Decoupled diffusion: `L_t = (1 - t) L_0 + sqrt(t) eps` with an analytic
//! reverse transition over arbitrary intervals.

use rand::Rng;
use rand_distr::StandardNormal;
use voxpart_autodiff::{Tensor, Var};

use crate::error::{Error, Result};
use crate::registry::Registry;

pub const DEFAULT_T_MIN: f64 = 1e-3;

pub fn forward_sample(l0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    let st = t.sqrt();
    Ok(l0.zip_map(eps, |a, e| (1.0 - t) * a + st * e)?)
}

/// Mean and variance of `L_{t-dt}` given `L_t` and the two predictions.
#[derive(Clone, Debug)]
pub struct Transition {
    pub mean: Tensor,
    pub variance: f64,
}

pub fn transition(lt: &Tensor, t: f64, dt: f64, l_pred: &Tensor, eps_pred: &Tensor) -> Result<Transition> {
    if !(t <= 1.0 + 1e-12 && dt > 0.0) {
        return Err(Error::invalid(format!("invalid step t = {t}, dt = {dt}")));
    }
    if dt > t * (1.0 + 1e-12) {
        return Err(Error::invalid("step exceeds remaining time"));
    }
    let dt = dt.min(t);
    let c = dt / t.sqrt();
    let mut mean = lt.zip_map(l_pred, |x, l| x + dt * l)?;
    mean.axpy(-c, eps_pred);
    Ok(Transition {
        mean,
        variance: (dt * (t - dt) / t).max(0.0),
    })
}

/// One reverse transition. `noise` is only read when `stochastic`.
pub fn reverse_step(
    lt: &Tensor,
    t: f64,
    dt: f64,
    l_pred: &Tensor,
    eps_pred: &Tensor,
    noise: &Tensor,
    stochastic: bool,
) -> Result<Tensor> {
    let Transition { mut mean, variance } = transition(lt, t, dt, l_pred, eps_pred)?;
    if stochastic {
        if noise.shape() != mean.shape() {
            return Err(Error::invalid("noise shape differs from latent shape"));
        }
        mean.axpy(variance.sqrt(), noise);
    }
    Ok(mean)
}

/// `mse(L_pred, L0) + mse(eps_pred, eps)`.
pub fn diffusion_loss<'t>(l_pred: Var<'t>, l0: Var<'t>, eps_pred: Var<'t>, eps: Var<'t>) -> Result<Var<'t>> {
    Ok(l_pred.mse(l0)?.add(eps_pred.mse(eps)?)?)
}

/// `-ln(clamp(t, t_min, 1))`.
pub fn lambda_t(t: f64, t_min: f64) -> f64 {
    -t.clamp(t_min, 1.0).ln()
}

/// Uniform draw on `[t_min, 1]`.
pub fn draw_training_time<R: Rng + ?Sized>(rng: &mut R, t_min: f64) -> f64 {
    if t_min >= 1.0 {
        return 1.0;
    }
    t_min + (1.0 - t_min) * rng.gen::<f64>()
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Sampler time grid `1 = t_0 > ... > t_N = 0`.
pub trait TimeSchedule: Send + Sync {
    fn times(&self, steps: usize) -> Vec<f64>;
}

/// `t_k = 1 - k/N`.
pub struct Uniform;

impl TimeSchedule for Uniform {
    fn times(&self, steps: usize) -> Vec<f64> {
        (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect()
    }
}

/// `t_k = (1 - k/N)^2`: finer steps near the data end.
pub struct Quadratic;

impl TimeSchedule for Quadratic {
    fn times(&self, steps: usize) -> Vec<f64> {
        (0..=steps).map(|k| (1.0 - k as f64 / steps as f64).powi(2)).collect()
    }
}

pub fn schedule_registry() -> Registry<dyn TimeSchedule> {
    Registry::new("time schedule")
        .with("uniform", |_: &()| Box::new(Uniform) as Box<dyn TimeSchedule>)
        .with("quadratic", |_: &()| Box::new(Quadratic) as Box<dyn TimeSchedule>)
}

/// Validated schedule from a named strategy.
pub fn schedule(name: &str, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let times = schedule_registry().create(name, &())?.times(steps);
    validate_schedule(&times)?;
    Ok(times)
}

pub fn validate_schedule(times: &[f64]) -> Result<()> {
    let ok = times.len() >= 2
        && times[0] == 1.0
        && *times.last().unwrap() == 0.0
        && times.windows(2).all(|w| w[0] > w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::Config("schedule must decrease strictly from 1 to 0".into()))
    }
}

/// Anything that predicts `(L_0, eps)` from `(L_t, t)`, optionally with a
/// conditioning embedding.
pub trait Denoiser {
    fn predict(&self, lt: &Tensor, t: f64, embedding: Option<&Tensor>) -> Result<(Tensor, Tensor)>;
}

/// Conditioning embedding plus classifier-free guidance scale.
pub struct Guidance<'a> {
    pub embedding: &'a Tensor,
    pub scale: f64,
}

fn guided<D: Denoiser + ?Sized>(d: &D, lt: &Tensor, t: f64, guidance: Option<&Guidance<'_>>) -> Result<(Tensor, Tensor)> {
    let Some(g) = guidance else {
        return d.predict(lt, t, None);
    };
    let (ln, en) = d.predict(lt, t, None)?;
    let (lc, ec) = d.predict(lt, t, Some(g.embedding))?;
    let mix = |null: &Tensor, cond: &Tensor| null.zip_map(cond, |a, b| a + g.scale * (b - a));
    Ok((mix(&ln, &lc)?, mix(&en, &ec)?))
}

/// Runs the reverse chain from `init` (the noise at `t = 1`) down `times`.
/// Every step but the last adds fresh noise from `rng`.
pub fn run_sampler<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    init: Tensor,
    times: &[f64],
    guidance: Option<&Guidance<'_>>,
    rng: &mut R,
) -> Result<Tensor> {
    validate_schedule(times)?;
    let mut l = init;
    for (k, w) in times.windows(2).enumerate() {
        let (t, dt) = (w[0], w[0] - w[1]);
        let (lp, ep) = guided(denoiser, &l, t, guidance)?;
        let last = k + 2 == times.len();
        let noise = if last {
            Tensor::zeros(l.shape().to_vec())
        } else {
            standard_normal(l.shape(), rng)
        };
        l = reverse_step(&l, t, dt, &lp, &ep, &noise, !last)?;
        if !l.all_finite() {
            return Err(Error::Numeric(format!("sampler produced non-finite latents at t = {t}")));
        }
    }
    Ok(l)
}

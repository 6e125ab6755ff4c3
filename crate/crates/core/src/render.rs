//! Alpha compositing, batched differentiable rendering and image losses.

use std::fmt;

use rand::Rng;
use voxpart_autodiff::{Tape, Tensor, Var};

use crate::camera::{sample_depths, Camera, Ray};
use crate::error::{Error, Result};
use crate::field::{world_to_grid, FieldBundle};
use crate::image::{RgbImage, BACKGROUND_LABEL};

/// Composites per-sample emissions `values [M x C]` front to back.
/// Returns `(out, acc)` without background.
pub fn composite(values: &[f64], channels: usize, sigmas: &[f64], deltas: &[f64]) -> Result<(Vec<f64>, f64)> {
    if sigmas.len() != deltas.len() || values.len() != sigmas.len() * channels {
        return Err(Error::invalid("composite: length mismatch"));
    }
    if sigmas.iter().any(|&s| s < 0.0 || s.is_nan()) {
        return Err(Error::invalid("composite: negative density"));
    }
    let mut out = vec![0.0; channels];
    let mut trans = 1.0;
    let mut acc = 0.0;
    for (i, (&s, &d)) in sigmas.iter().zip(deltas).enumerate() {
        let alpha = 1.0 - (-s * d).exp();
        let w = alpha * trans;
        for (o, v) in out.iter_mut().zip(&values[i * channels..(i + 1) * channels]) {
            *o += w * v;
        }
        acc += w;
        trans *= 1.0 - alpha;
    }
    Ok((out, acc))
}

/// Sample positions for a batch of rays, expressed in grid coordinates.
#[derive(Clone, Debug)]
pub struct RayBatch {
    /// `[R*M, 3]` continuous grid coordinates.
    pub coords: Tensor,
    /// `[R, M]` spacings.
    pub deltas: Tensor,
    /// `[R*M, 3]` unit view direction per sample.
    pub dirs: Tensor,
    pub rays: usize,
    pub samples: usize,
}

impl RayBatch {
    pub fn new<R: Rng + ?Sized>(rays: &[Ray], m: usize, jitter: bool, dims: [usize; 3], rng: &mut R) -> Result<Self> {
        if m < 2 || rays.is_empty() {
            return Err(Error::invalid("ray batch needs rays and at least 2 samples"));
        }
        let r = rays.len();
        let mut coords = Vec::with_capacity(r * m * 3);
        let mut deltas = Vec::with_capacity(r * m);
        let mut dirs = Vec::with_capacity(r * m * 3);
        for ray in rays {
            let (ts, ds) = sample_depths(ray.t_near, ray.t_far, m, jitter, rng);
            for t in ts {
                coords.extend(world_to_grid(dims, ray.origin + ray.direction * t));
                dirs.extend(ray.direction.0);
            }
            deltas.extend(ds);
        }
        Ok(RayBatch {
            coords: Tensor::new(vec![r * m, 3], coords)?,
            deltas: Tensor::new(vec![r, m], deltas)?,
            dirs: Tensor::new(vec![r * m, 3], dirs)?,
            rays: r,
            samples: m,
        })
    }
}

/// Rendered quantities for a ray batch; colours exclude the background.
#[derive(Clone, Copy)]
pub struct Rendered<'t> {
    /// `[R, 3]`
    pub rgb: Var<'t>,
    /// `[R]`
    pub acc: Var<'t>,
    /// `[R, K]` composited part probabilities, when a part head is active.
    pub part: Option<Var<'t>>,
}

/// Compositing weights `[R, M]` from non-negative densities `[R, M]`.
pub fn composite_weights<'t>(sigma: Var<'t>, deltas: &Tensor) -> Result<Var<'t>> {
    let tape = sigma.tape();
    let decay = sigma.mul(tape.constant(deltas.clone()))?.neg().exp();
    let alpha = decay.one_minus();
    Ok(alpha.mul(decay.cumprod_exclusive())?)
}

/// Activated densities `[R, M]` from a grid whose channel 0 is the logit.
pub fn sample_density<'t>(grid: Var<'t>, batch: &RayBatch, shift: f64) -> Result<Var<'t>> {
    let density = grid.narrow(0, 0, 1)?.trilinear_sample(&batch.coords)?;
    Ok(density.add_scalar(shift).softplus().reshape(&[batch.rays, batch.samples])?)
}

/// Fit-mode rendering of a `[1 + 3, X, Y, Z]` grid: colour is the sigmoid of
/// the logit-RGB features.
pub fn render_fit<'t>(grid: Var<'t>, batch: &RayBatch, shift: f64) -> Result<Rendered<'t>> {
    let sigma = sample_density(grid, batch, shift)?;
    let c = grid.shape()[0];
    let rgb_pts = grid.narrow(0, 1, c - 1)?.trilinear_sample(&batch.coords)?.sigmoid();
    let w = composite_weights(sigma, &batch.deltas)?;
    Ok(Rendered {
        rgb: w.segment_weighted_sum(rgb_pts)?,
        acc: w.sum_last(),
        part: None,
    })
}

/// `1 - acc` as an `[R, 1]` column.
fn background_column<'t>(acc: Var<'t>) -> Result<Var<'t>> {
    let r = acc.shape()[0];
    Ok(acc.one_minus().reshape(&[r, 1])?)
}

/// Colours composited over a white background, `[R, 3]`.
pub fn on_white<'t>(r: &Rendered<'t>) -> Result<Var<'t>> {
    let bg = background_column(r.acc)?;
    Ok(r.rgb.add(Var::concat(&[bg, bg, bg], 1)?)?)
}

/// Mean squared error of the white-composited colour against `gt [R, 3]`.
pub fn rgb_loss<'t>(r: &Rendered<'t>, gt: &Tensor) -> Result<Var<'t>> {
    let pred = on_white(r)?;
    Ok(pred.mse(pred.tape().constant(gt.clone()))?)
}

/// Class distribution `[R, K + 1]` with the background as the last slot.
pub fn class_distribution<'t>(r: &Rendered<'t>) -> Result<Var<'t>> {
    let part = r
        .part
        .ok_or_else(|| Error::invalid("rendering has no part head"))?;
    Ok(Var::concat(&[part, background_column(r.acc)?], 1)?)
}

/// Mean cross-entropy of the composited class distribution against labels
/// in `0..=K`, `K` meaning background.
pub fn part_loss<'t>(r: &Rendered<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let q = class_distribution(r)?;
    let k1 = q.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k1) {
        return Err(Error::invalid(format!("part label {bad} out of range for K = {}", k1 - 1)));
    }
    Ok(q.pick(labels)?.add_scalar(1e-10).log().mean().neg())
}

/// Colour MSE plus, when labels are given, the part cross-entropy.
pub fn rendering_loss<'t>(r: &Rendered<'t>, gt: &Tensor, labels: Option<&[usize]>) -> Result<Var<'t>> {
    let rgb = rgb_loss(r, gt)?;
    match labels {
        Some(l) => Ok(rgb.add(part_loss(r, l)?)?),
        None => Ok(rgb),
    }
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    /// Identical inputs.
    Exact,
    Db(f64),
}

impl Psnr {
    /// Decibels, with `Exact` as `+inf`.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Exact => f64::INFINITY,
            Psnr::Db(v) => v,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Exact => f.write_str("exact"),
            Psnr::Db(v) => write!(f, "{v:.2}"),
        }
    }
}

pub fn psnr(a: &[f64], b: &[f64]) -> Result<Psnr> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("psnr: inputs differ in size"));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 {
        Psnr::Exact
    } else {
        Psnr::Db(10.0 * (1.0 / mse).log10())
    })
}

/// Pixels whose rays reach the world bounds, with the clipped rays.
pub fn hit_pixels(camera: &Camera) -> Vec<(usize, Ray)> {
    camera
        .all_rays()
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.ray().map(|ray| (i, ray)))
        .collect()
}

/// Renders every pixel through `render` in chunks; returns white-composited
/// colours and, when available, argmax part labels (background if the
/// background slot wins).
pub fn render_image<F>(camera: &Camera, m: usize, dims: [usize; 3], render: F) -> Result<(RgbImage, Option<Vec<u8>>)>
where
    F: for<'t> Fn(&'t Tape, &RayBatch) -> Result<Rendered<'t>>,
{
    const CHUNK: usize = 1024;
    let (w, h) = (camera.width, camera.height);
    let mut img = RgbImage::filled(w, h, 1.0);
    let mut labels: Option<Vec<u8>> = None;
    let hits = hit_pixels(camera);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for chunk in hits.chunks(CHUNK) {
        let rays: Vec<Ray> = chunk.iter().map(|(_, r)| *r).collect();
        let batch = RayBatch::new(&rays, m, false, dims, &mut rng)?;
        let tape = Tape::new();
        let out = render(&tape, &batch)?;
        let rgb = on_white(&out)?.value();
        for ((pix, _), c) in chunk.iter().zip(rgb.data().chunks(3)) {
            img.data[pix * 3..pix * 3 + 3].copy_from_slice(c);
        }
        if out.part.is_some() {
            let q = class_distribution(&out)?.value();
            let k1 = q.shape()[1];
            let map = labels.get_or_insert_with(|| vec![BACKGROUND_LABEL; w * h]);
            for ((pix, _), row) in chunk.iter().zip(q.data().chunks(k1)) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0;
                map[*pix] = if best == k1 - 1 { BACKGROUND_LABEL } else { best as u8 };
            }
        }
    }
    Ok((img, labels))
}

/// Fit-mode render of a whole view of `field`.
pub fn render_field_image(field: &FieldBundle, camera: &Camera, m: usize, shift: f64) -> Result<RgbImage> {
    let grid = field.grid();
    Ok(render_image(camera, m, field.dims(), |tape, batch| {
        render_fit(tape.constant(grid.clone()), batch, shift)
    })?
    .0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Explicit running-transmittance loop.
    fn sequential(values: &[f64], c: usize, s: &[f64], d: &[f64]) -> (Vec<f64>, f64) {
        let mut out = vec![0.0; c];
        let mut acc = 0.0;
        for i in 0..s.len() {
            let mut t = 1.0;
            for j in 0..i {
                t *= (-s[j] * d[j]).exp();
            }
            let w = t * (1.0 - (-s[i] * d[i]).exp());
            for ch in 0..c {
                out[ch] += w * values[i * c + ch];
            }
            acc += w;
        }
        (out, acc)
    }

    #[test]
    fn composite_special_cases() {
        let (out, acc) = composite(&[0.3, 0.7], 1, &[0.0, 0.0], &[0.1, 0.1]).unwrap();
        assert_eq!((out[0], acc), (0.0, 0.0));
        let (out, acc) = composite(&[0.3, 0.7], 1, &[f64::INFINITY, 1.0], &[0.1, 0.1]).unwrap();
        assert_eq!((out[0], acc), (0.3, 1.0));
        let ln2 = std::f64::consts::LN_2;
        let (out, _) = composite(&[0.2, 0.8], 1, &[ln2, f64::INFINITY], &[1.0, 1.0]).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15);
        assert!(composite(&[0.0], 1, &[-1.0], &[1.0]).is_err());
    }

    #[test]
    fn composite_matches_sequential_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let m = rng.gen_range(2..20);
            let s: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..5.0)).collect();
            let d: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..0.5)).collect();
            let v: Vec<f64> = (0..m * 3).map(|_| rng.gen()).collect();
            let (a, acc) = composite(&v, 3, &s, &d).unwrap();
            let (b, acc2) = sequential(&v, 3, &s, &d);
            assert!((acc - acc2).abs() < 1e-12 && acc <= 1.0);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn psnr_values() {
        assert_eq!(psnr(&[0.1, 0.2], &[0.1, 0.2]).unwrap(), Psnr::Exact);
        assert_eq!(Psnr::Exact.to_string(), "exact");
        let p = psnr(&[0.0; 4], &[0.1; 4]).unwrap().db();
        assert!((p - 20.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_classes_give_log_five() {
        let tape = Tape::new();
        let r = Rendered {
            rgb: tape.constant(Tensor::zeros(vec![2, 3])),
            acc: tape.constant(Tensor::full(vec![2], 0.8)),
            part: Some(tape.constant(Tensor::full(vec![2, 4], 0.2))),
        };
        let ce = part_loss(&r, &[0, 4]).unwrap().item();
        assert!((ce - 5f64.ln()).abs() < 1e-9);
        assert!(part_loss(&r, &[5, 0]).is_err());
    }

    #[test]
    fn empty_field_renders_white() {
        let field = FieldBundle::constant([4, 4, 4], -50.0, 3);
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 2.0), Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), 6, 6, 0.6);
        let img = render_field_image(&field, &cam, 16, -2.0).unwrap();
        assert!(img.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}

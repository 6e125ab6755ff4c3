use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxpart_autodiff::Tensor;

use crate::diffusion::{run_sampler, standard_normal, Guidance};
use crate::error::{Error, Result};
use crate::field::{activate_density, FieldBundle, EMPTY_LOGIT};
use crate::metrics::default_threshold;
use crate::seed::{derive_seed, label_hash};

use super::model::Model;

/// Spherical interpolation between two flattened tensors of equal shape.
pub fn slerp(a: &Tensor, b: &Tensor, s: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("slerp of {:?} and {:?}", a.shape(), b.shape())));
    }
    let (na, nb) = (a.sum_squares().sqrt(), b.sum_squares().sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("slerp needs non-zero inputs"));
    }
    if s == 0.0 {
        return Ok(a.clone());
    }
    if s == 1.0 {
        return Ok(b.clone());
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    // Compared on the cosine: acos turns rounding near -1 into ~1e-8 rad.
    if cos < -1.0 + 1e-12 {
        return Err(Error::invalid("undefined slerp: inputs are antiparallel"));
    }
    let omega = cos.acos();
    let so = omega.sin();
    let (wa, wb) = if so < 1e-12 {
        (1.0 - s, s)
    } else {
        (((1.0 - s) * omega).sin() / so, (s * omega).sin() / so)
    };
    a.zip_map(b, |x, y| wa * x + wb * y).map_err(Into::into)
}

/// Runs the sampler from `init` with a sampler RNG seeded by `seed` and
/// decodes the result.
pub fn sample_from_noise(model: &Model, init: Tensor, times: &[f64], guidance: Option<&Guidance<'_>>, seed: u64) -> Result<FieldBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let denoiser = model.unet.denoiser(model.decoder.part_code());
    let latent = run_sampler(&denoiser, init, times, guidance, &mut rng)?;
    FieldBundle::from_grid(&model.ae.decode_tensor(&latent)?)
}

/// Initial noise of shape `index` drawn from a base seed.
pub fn initial_noise(model: &Model, seed: u64, index: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index));
    standard_normal(&model.cfg.latent_shape(), &mut rng)
}

/// Seed of the per-step sampler noise. It is shared by every shape drawn
/// from the same base seed, so interpolation frames differ only in their
/// initial noise.
pub fn sampler_seed(seed: u64) -> u64 {
    derive_seed(seed, label_hash("sampler"))
}

/// Samples shapes `0..count` of base seed `seed`.
pub fn sample_shapes(model: &Model, seed: u64, count: usize, times: &[f64], guidance: Option<&Guidance<'_>>) -> Result<Vec<FieldBundle>> {
    (0..count as u64)
        .map(|i| sample_from_noise(model, initial_noise(model, seed, i), times, guidance, sampler_seed(seed)))
        .collect()
}

/// One shape per entry of `s`, sampled from slerped noise. Every frame uses
/// the same sampler seed, so `s = 0` and `s = 1` reproduce
/// `sample_from_noise(eps_a, seed)` and `sample_from_noise(eps_b, seed)`.
pub fn interpolate(
    model: &Model,
    eps_a: &Tensor,
    eps_b: &Tensor,
    s: &[f64],
    times: &[f64],
    guidance: Option<&Guidance<'_>>,
    seed: u64,
) -> Result<Vec<FieldBundle>> {
    s.iter()
        .map(|&si| sample_from_noise(model, slerp(eps_a, eps_b, si)?, times, guidance, seed))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    A,
    B,
    /// The part is taken from neither source.
    Drop,
}

/// Parses `name=a,name=b,...`; parts may be named or given by index.
/// Parts not mentioned are dropped.
pub fn parse_assignment(spec: &str, part_names: &[String]) -> Result<Vec<Source>> {
    let mut out = vec![Source::Drop; part_names.len()];
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (part, src) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("assignment entry {item:?} is not part=source")))?;
        let part = part.trim();
        let idx = part_names
            .iter()
            .position(|n| n == part)
            .or_else(|| part.parse::<usize>().ok().filter(|&i| i < part_names.len()))
            .ok_or_else(|| Error::Config(format!("unknown part {part:?}; parts are {}", part_names.join(", "))))?;
        out[idx] = match src.trim().to_ascii_lowercase().as_str() {
            "a" => Source::A,
            "b" => Source::B,
            "none" | "-" => Source::Drop,
            other => return Err(Error::Config(format!("part source {other:?} must be a, b or none"))),
        };
    }
    Ok(out)
}

/// Composes two fields part by part in their shared grid.
///
/// A voxel is claimed by a source when its activated density exceeds the
/// occupancy threshold and its most likely part is assigned to that source.
/// Voxels claimed by both keep the denser source (averaged on ties); voxels
/// claimed by neither are emptied.
pub fn mix(model: &Model, a: &FieldBundle, b: &FieldBundle, assignment: &[Source]) -> Result<FieldBundle> {
    let k = model.cfg.parts;
    if assignment.len() != k {
        return Err(Error::invalid(format!("assignment covers {} parts, the model has {k}", assignment.len())));
    }
    if a.dims() != b.dims() || a.channels() != b.channels() || a.dims() != model.cfg.field_dims() {
        return Err(Error::invalid("mixed fields must share the model's extents"));
    }
    let shift = model.cfg.shift;
    let claims = |f: &FieldBundle, want: Source| -> Result<Vec<bool>> {
        let probs = model.decoder.node_part_probs(&f.grid())?;
        let tau = default_threshold(f);
        let sigma = f.activated(shift);
        Ok(probs
            .data()
            .chunks(k)
            .zip(&sigma)
            .map(|(p, &s)| {
                let arg = p
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.total_cmp(y.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                s > tau && assignment[arg] == want
            })
            .collect())
    };
    let (ca, cb) = (claims(a, Source::A)?, claims(b, Source::B)?);
    let n = ca.len();
    let feat_c = a.channels() - 1;
    let (da, db) = (a.density().data(), b.density().data());
    let (fa, fb) = (a.feature().data(), b.feature().data());
    let mut dens = vec![0.0; n];
    let mut feat = vec![0.0; feat_c * n];
    for i in 0..n {
        // Weight of a in the composed voxel.
        let wa = match (ca[i], cb[i]) {
            (true, false) => 1.0,
            (false, true) => 0.0,
            (true, true) => {
                let (sa, sb) = (activate_density(da[i], shift), activate_density(db[i], shift));
                if sa > sb {
                    1.0
                } else if sb > sa {
                    0.0
                } else {
                    0.5
                }
            }
            (false, false) => -1.0,
        };
        if wa < 0.0 {
            dens[i] = EMPTY_LOGIT;
            for c in 0..feat_c {
                feat[c * n + i] = 0.5 * (fa[c * n + i] + fb[c * n + i]);
            }
        } else {
            let mixv = |x: f64, y: f64| if wa == 1.0 { x } else if wa == 0.0 { y } else { 0.5 * (x + y) };
            dens[i] = mixv(da[i], db[i]);
            for c in 0..feat_c {
                feat[c * n + i] = mixv(fa[c * n + i], fb[c * n + i]);
            }
        }
    }
    let shape = a.density().shape().to_vec();
    let mut fshape = shape.clone();
    fshape[0] = feat_c;
    let out = FieldBundle::new(Tensor::new(shape, dens)?, Tensor::new(fshape, feat)?)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let (a, b) = (t(&[1.0, 0.0, 0.0]), t(&[0.0, 1.0, 0.0]));
        assert_eq!(slerp(&a, &b, 0.0).unwrap(), a);
        assert_eq!(slerp(&a, &b, 1.0).unwrap(), b);
        let m = slerp(&a, &b, 0.5).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for (x, y) in m.data().iter().zip([h, h, 0.0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn slerp_keeps_equal_norms() {
        let (a, b) = (t(&[3.0, 4.0, 0.0]), t(&[0.0, -3.0, 4.0]));
        for i in 0..=20 {
            let n = slerp(&a, &b, i as f64 / 20.0).unwrap().sum_squares().sqrt();
            assert!((n - 5.0).abs() < 1e-9, "{n}");
        }
    }

    #[test]
    fn slerp_rejects_antiparallel() {
        let a = t(&[1.0, 2.0]);
        let err = slerp(&a, &t(&[-1.0, -2.0]), 0.3).unwrap_err();
        assert!(err.to_string().contains("undefined slerp"));
    }

    #[test]
    fn assignment_parsing() {
        let names: Vec<String> = ["seat", "legs", "stretcher", "cushion"].iter().map(|s| s.to_string()).collect();
        let a = parse_assignment("seat=a, 1=B", &names).unwrap();
        assert_eq!(a, vec![Source::A, Source::B, Source::Drop, Source::Drop]);
        assert!(parse_assignment("wing=a", &names).is_err());
        assert!(parse_assignment("seat=c", &names).is_err());
        assert!(parse_assignment("seat", &names).is_err());
    }
}

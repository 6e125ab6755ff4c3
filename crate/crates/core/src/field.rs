//! Explicit density/colour voxel fields.
//!
//! A field stores pre-activation density logits `[1, X, Y, Z]` and
//! logit-RGB colour features `[C_c, X, Y, Z]` on grid nodes spanning the
//! unit cube: node `i` along an axis sits at `min + i * extent / (n - 1)`.

use std::io::{Read, Write};
use std::path::Path;

use voxpart_autodiff::ops::trilinear_sample_tensor;
use voxpart_autodiff::{AutodiffError, Tensor, Var};

use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};

/// Logit used for voxels that must render as empty space.
pub const EMPTY_LOGIT: f64 = -30.0;
/// Default number of colour feature channels (logit RGB).
pub const COLOR_CHANNELS: usize = 3;

const VXF_MAGIC: &[u8; 4] = b"VXF1";

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `softplus(logit + shift)`: non-negative density.
pub fn activate_density(logit: f64, shift: f64) -> f64 {
    softplus(logit + shift)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldBundle {
    density: Tensor,
    feature: Tensor,
    bounds: Aabb,
}

impl FieldBundle {
    pub fn new(density: Tensor, feature: Tensor) -> Result<Self> {
        let (ds, fs) = (density.shape(), feature.shape());
        if ds.len() != 4 || ds[0] != 1 || fs.len() != 4 || ds[1..] != fs[1..] {
            return Err(Error::invalid(format!(
                "density {ds:?} and feature {fs:?} must be [1,X,Y,Z] and [C,X,Y,Z]"
            )));
        }
        if !density.all_finite() || !feature.all_finite() {
            return Err(Error::Numeric("field contains non-finite values".into()));
        }
        Ok(FieldBundle {
            density,
            feature,
            bounds: Aabb::UNIT,
        })
    }

    /// Splits a concatenated `[C_v, X, Y, Z]` grid, density first.
    pub fn from_grid(grid: &Tensor) -> Result<Self> {
        let (density, feature) = split_fields(grid)?;
        Self::new(density, feature)
    }

    /// Uniform field with the given density logit and zero features.
    pub fn constant(res: [usize; 3], logit: f64, channels: usize) -> Self {
        FieldBundle {
            density: Tensor::full(vec![1, res[0], res[1], res[2]], logit),
            feature: Tensor::zeros(vec![channels, res[0], res[1], res[2]]),
            bounds: Aabb::UNIT,
        }
    }

    pub fn density(&self) -> &Tensor {
        &self.density
    }

    pub fn feature(&self) -> &Tensor {
        &self.feature
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.density.shape();
        [s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        1 + self.feature.shape()[0]
    }

    /// `V^f`: density and features concatenated along channels.
    pub fn grid(&self) -> Tensor {
        concat_fields(&self.density, &self.feature).expect("bundle extents agree")
    }

    /// World position of grid node `idx`.
    pub fn node_position(&self, idx: [usize; 3]) -> Vec3 {
        node_position(self.dims(), idx)
    }

    /// Continuous grid coordinates of `x`, clamped to the bounds.
    pub fn world_to_grid(&self, x: Vec3) -> [f64; 3] {
        world_to_grid(self.dims(), x)
    }

    /// Distance between diagonally opposite nodes of one cell.
    pub fn voxel_diagonal(&self) -> f64 {
        voxel_diagonal(self.dims())
    }

    /// Trilinear lookup of `(density logit, features)` at a world position.
    pub fn query(&self, x: Vec3) -> Result<(f64, Vec<f64>)> {
        if !x.is_finite() {
            return Err(Error::invalid("non-finite query position"));
        }
        let g = self.world_to_grid(x);
        let coords = Tensor::new(vec![1, 3], g.to_vec())?;
        let sigma = trilinear_sample_tensor(&self.density, &coords)?.item();
        let feat = trilinear_sample_tensor(&self.feature, &coords)?.into_data();
        Ok((sigma, feat))
    }

    /// Activated densities at every node, `[X*Y*Z]` in z-fastest order.
    pub fn activated(&self, shift: f64) -> Vec<f64> {
        self.density.data().iter().map(|&l| activate_density(l, shift)).collect()
    }

    pub fn to_vxf_bytes(&self) -> Vec<u8> {
        let grid = self.grid();
        let [x, y, z] = self.dims();
        let c = self.channels();
        let mut out = Vec::with_capacity(20 + grid.numel() * 4);
        out.extend_from_slice(VXF_MAGIC);
        for v in [x, y, z, c] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        // File order is channel-major, then x fastest.
        let d = grid.data();
        for ch in 0..c {
            for k in 0..z {
                for j in 0..y {
                    for i in 0..x {
                        let v = d[((ch * x + i) * y + j) * z + k] as f32;
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_vxf_reader<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("vxf: {m}"));
        let mut head = [0u8; 20];
        r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if &head[..4] != VXF_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (x, y, z, c) = (word(0), word(1), word(2), word(3));
        if x == 0 || y == 0 || z == 0 || c < 2 || x * y * z * c > 1 << 28 {
            return Err(bad("implausible extents"));
        }
        let mut raw = vec![0u8; x * y * z * c * 4];
        r.read_exact(&mut raw).map_err(|_| bad("truncated data"))?;
        let mut data = vec![0.0; x * y * z * c];
        let mut it = raw.chunks_exact(4);
        for ch in 0..c {
            for k in 0..z {
                for j in 0..y {
                    for i in 0..x {
                        let b = it.next().unwrap();
                        data[((ch * x + i) * y + j) * z + k] = f32::from_le_bytes(b.try_into().unwrap()) as f64;
                    }
                }
            }
        }
        Self::from_grid(&Tensor::new(vec![c, x, y, z], data)?)
    }

    pub fn save_vxf(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_vxf_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_vxf(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_vxf_reader(std::io::BufReader::new(f))
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

pub fn node_position(dims: [usize; 3], idx: [usize; 3]) -> Vec3 {
    let b = Aabb::UNIT;
    Vec3(std::array::from_fn(|a| {
        let span = b.max.0[a] - b.min.0[a];
        b.min.0[a] + span * idx[a] as f64 / (dims[a].max(2) - 1) as f64
    }))
}

pub fn world_to_grid(dims: [usize; 3], x: Vec3) -> [f64; 3] {
    let b = Aabb::UNIT;
    std::array::from_fn(|a| {
        let u = ((x.0[a] - b.min.0[a]) / (b.max.0[a] - b.min.0[a])).clamp(0.0, 1.0);
        u * (dims[a].max(1) - 1) as f64
    })
}

pub fn voxel_diagonal(dims: [usize; 3]) -> f64 {
    let b = Aabb::UNIT;
    (0..3)
        .map(|a| ((b.max.0[a] - b.min.0[a]) / (dims[a].max(2) - 1) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn concat_fields(density: &Tensor, feature: &Tensor) -> Result<Tensor> {
    let (ds, fs) = (density.shape(), feature.shape());
    if ds.len() != 4 || fs.len() != 4 || ds[1..] != fs[1..] {
        return Err(Error::invalid(format!("cannot concatenate fields {ds:?} and {fs:?}")));
    }
    let mut data = density.data().to_vec();
    data.extend_from_slice(feature.data());
    Ok(Tensor::new(vec![ds[0] + fs[0], ds[1], ds[2], ds[3]], data)?)
}

/// Inverse of [`concat_fields`] with a single density channel.
pub fn split_fields(grid: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = grid.shape();
    if s.len() != 4 || s[0] < 2 {
        return Err(Error::invalid(format!("field grid must be [C>=2,X,Y,Z], got {s:?}")));
    }
    let vol = s[1] * s[2] * s[3];
    let density = Tensor::new(vec![1, s[1], s[2], s[3]], grid.data()[..vol].to_vec())?;
    let feature = Tensor::new(vec![s[0] - 1, s[1], s[2], s[3]], grid.data()[vol..].to_vec())?;
    Ok((density, feature))
}

/// Per-channel sums of squared forward differences along x, y and z.
fn tv_terms(x: &Tensor) -> Vec<[f64; 3]> {
    let s = x.shape();
    let (c, nx, ny, nz) = (s[0], s[1], s[2], s[3]);
    let d = x.data();
    (0..c)
        .map(|ch| {
            let at = |i: usize, j: usize, k: usize| d[((ch * nx + i) * ny + j) * nz + k];
            let mut t = [0.0; 3];
            for i in 0..nx {
                for j in 0..ny {
                    for k in 0..nz {
                        let v = at(i, j, k);
                        if i + 1 < nx {
                            t[0] += (at(i + 1, j, k) - v).powi(2);
                        }
                        if j + 1 < ny {
                            t[1] += (at(i, j + 1, k) - v).powi(2);
                        }
                        if k + 1 < nz {
                            t[2] += (at(i, j, k + 1) - v).powi(2);
                        }
                    }
                }
            }
            t
        })
        .collect()
}

/// Total variation `sum_c sqrt(Dx_c + Dy_c + Dz_c)` of a `[D, X, Y, Z]` var.
pub fn tv_loss(field: Var<'_>) -> voxpart_autodiff::Result<Var<'_>> {
    let x = field.value();
    let s = x.shape().to_vec();
    if s.len() != 4 || s[1..].iter().any(|&e| e < 2) {
        return Err(AutodiffError::InvalidArgument(format!("field too small for TV: {s:?}")));
    }
    let norms: Vec<f64> = tv_terms(&x).iter().map(|t| (t[0] + t[1] + t[2]).sqrt()).collect();
    let value = Tensor::scalar(norms.iter().sum());
    Ok(field.tape().custom(&[field], value, move |g, _| {
        let (nx, ny, nz) = (s[1], s[2], s[3]);
        let d = x.data();
        let mut gx = vec![0.0; d.len()];
        let gs = g.item();
        for (ch, &n) in norms.iter().enumerate() {
            if n == 0.0 {
                continue;
            }
            let base = ch * nx * ny * nz;
            let idx = |i: usize, j: usize, k: usize| base + (i * ny + j) * nz + k;
            let f = gs / n;
            for i in 0..nx {
                for j in 0..ny {
                    for k in 0..nz {
                        let here = idx(i, j, k);
                        for next in [
                            (i + 1 < nx).then(|| idx(i + 1, j, k)),
                            (j + 1 < ny).then(|| idx(i, j + 1, k)),
                            (k + 1 < nz).then(|| idx(i, j, k + 1)),
                        ]
                        .into_iter()
                        .flatten()
                        {
                            let diff = d[next] - d[here];
                            gx[next] += f * diff;
                            gx[here] -= f * diff;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::new(s.clone(), gx).expect("shape preserved"))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use voxpart_autodiff::{grad_check, Tape};

    fn random_field(rng: &mut ChaCha8Rng, res: [usize; 3]) -> FieldBundle {
        let d = Tensor::randn(vec![1, res[0], res[1], res[2]], 1.0, rng);
        let f = Tensor::randn(vec![3, res[0], res[1], res[2]], 1.0, rng);
        FieldBundle::new(d, f).unwrap()
    }

    #[test]
    fn activation_values() {
        assert_eq!(activate_density(0.0, 0.0), std::f64::consts::LN_2);
        assert!((activate_density(3.0, -1.0) - 2.126928).abs() < 1e-6);
        assert!(activate_density(-800.0, -2.0) < 1e-300);
    }

    #[test]
    fn query_at_nodes_returns_stored_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_field(&mut rng, [4, 5, 6]);
        let idx = [2, 3, 5];
        let (s, feat) = f.query(f.node_position(idx)).unwrap();
        let flat = (2 * 5 + 3) * 6 + 5;
        assert!((s - f.density().data()[flat]).abs() < 1e-12);
        for (c, v) in feat.iter().enumerate() {
            assert!((v - f.feature().data()[c * 120 + flat]).abs() < 1e-12);
        }
        assert!(f.query(Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn out_of_bounds_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_field(&mut rng, [3, 3, 3]);
        let inside = f.query(Vec3::new(0.5, 0.5, 0.5)).unwrap();
        let outside = f.query(Vec3::new(3.0, 9.0, 0.7)).unwrap();
        assert_eq!(inside, outside);
    }

    /// Hand-enumerated differences for a single 1 in a 2x2x2 grid.
    #[test]
    fn tv_single_voxel() {
        let tape = Tape::new();
        let mut t = Tensor::zeros(vec![1, 2, 2, 2]);
        t.data_mut()[0] = 1.0;
        let v = tv_loss(tape.constant(t)).unwrap().item();
        // One forward difference of magnitude 1 along each axis.
        assert!((v - 3f64.sqrt()).abs() < 1e-15);
        assert!(tv_loss(tape.constant(Tensor::zeros(vec![1, 1, 2, 2]))).is_err());
    }

    #[test]
    fn tv_matches_loop_oracle_and_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::randn(vec![2, 3, 4, 2], 1.0, &mut rng);
        let tape = Tape::new();
        let v = tv_loss(tape.constant(t.clone())).unwrap().item();
        let mut oracle = 0.0;
        for c in 0..2 {
            let at = |i: isize, j: isize, k: isize| -> Option<f64> {
                if i < 3 && j < 4 && k < 2 {
                    Some(t.data()[((c * 3 + i as usize) * 4 + j as usize) * 2 + k as usize])
                } else {
                    None
                }
            };
            let mut sq = 0.0;
            for i in 0..3 {
                for j in 0..4 {
                    for k in 0..2 {
                        let h = at(i, j, k).unwrap();
                        for n in [at(i + 1, j, k), at(i, j + 1, k), at(i, j, k + 1)].into_iter().flatten() {
                            sq += (n - h) * (n - h);
                        }
                    }
                }
            }
            oracle += f64::sqrt(sq);
        }
        assert!((v - oracle).abs() < 1e-12);
        let v3 = tv_loss(tape.constant(t.scale(3.0))).unwrap().item();
        assert!((v3 - 3.0 * v).abs() < 1e-12);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::randn(vec![2, 2, 3, 2], 1.0, &mut rng);
        let err = grad_check(|_, xs| tv_loss(xs[0]), &[t], 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn vxf_round_trip_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut f = random_field(&mut rng, [2, 3, 4]);
        // Round through f32 so the comparison is exact.
        for t in [&mut f.density, &mut f.feature] {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        let bytes = f.to_vxf_bytes();
        assert_eq!(&bytes[..4], b"VXF1");
        assert_eq!(bytes.len(), 20 + 4 * 24 * 4);
        // The second stored value is density at x = 1, y = 0, z = 0.
        let second = f32::from_le_bytes(bytes[24..28].try_into().unwrap()) as f64;
        assert_eq!(second, f.density().data()[12]);
        let back = FieldBundle::from_vxf_reader(&bytes[..]).unwrap();
        assert_eq!(back, f);
        assert!(FieldBundle::from_vxf_reader(&bytes[..30]).is_err());
    }

    #[test]
    fn split_concat_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_field(&mut rng, [2, 2, 2]);
        assert_eq!(f.grid().shape(), &[4, 2, 2, 2]);
        assert_eq!(FieldBundle::from_grid(&f.grid()).unwrap(), f);
        assert!(concat_fields(f.density(), &Tensor::zeros(vec![3, 2, 2, 3])).is_err());
    }

    #[test]
    fn query_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_field(&mut rng, [3, 3, 3]);
        let b = random_field(&mut rng, [3, 3, 3]);
        let mix = FieldBundle::from_grid(&{
            let mut g = a.grid().scale(2.0);
            g.axpy(-0.5, &b.grid());
            g
        })
        .unwrap();
        for _ in 0..20 {
            let x = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let (qa, qb, qm) = (a.query(x).unwrap(), b.query(x).unwrap(), mix.query(x).unwrap());
            assert!((qm.0 - (2.0 * qa.0 - 0.5 * qb.0)).abs() < 1e-12);
        }
    }
}

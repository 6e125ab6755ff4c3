use rayon::prelude::*;

use crate::error::{AutodiffError, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

type Corners = [(usize, f64); 8];

fn axis_weights(c: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let c = c.clamp(0.0, (n - 1) as f64);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64)
}

fn corners(p: [f64; 3], dims: [usize; 3]) -> Corners {
    let [ax, ay, az] = [0, 1, 2].map(|a| axis_weights(p[a], dims[a]));
    let mut out = [(0usize, 0.0f64); 8];
    let mut slot = 0;
    for (xi, wx) in [(ax.0, 1.0 - ax.2), (ax.1, ax.2)] {
        for (yi, wy) in [(ay.0, 1.0 - ay.2), (ay.1, ay.2)] {
            for (zi, wz) in [(az.0, 1.0 - az.2), (az.1, az.2)] {
                out[slot] = ((xi * dims[1] + yi) * dims[2] + zi, wx * wy * wz);
                slot += 1;
            }
        }
    }
    out
}

fn grid_dims(grid: &Tensor) -> Result<(usize, [usize; 3])> {
    match grid.shape() {
        [c, x, y, z] => Ok((*c, [*x, *y, *z])),
        s => Err(AutodiffError::InvalidShape {
            shape: s.to_vec(),
            reason: "grid must be [C, X, Y, Z]".into(),
        }),
    }
}

fn point_corners(coords: &Tensor, dims: [usize; 3]) -> Result<Vec<Corners>> {
    match coords.shape() {
        [_, 3] => {}
        s => {
            return Err(AutodiffError::InvalidShape {
                shape: s.to_vec(),
                reason: "coordinates must be [N, 3]".into(),
            })
        }
    }
    coords
        .data()
        .chunks(3)
        .map(|p| {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFiniteCoordinate);
            }
            Ok(corners([p[0], p[1], p[2]], dims))
        })
        .collect()
}

fn gather(grid: &Tensor, c: usize, vol: usize, cs: &[Corners]) -> Vec<f64> {
    let g = grid.data();
    let mut out = vec![0.0; cs.len() * c];
    out.par_chunks_mut(c.max(1) * 256)
        .zip(cs.par_chunks(256))
        .for_each(|(out_block, cs_block)| {
            for (row, corners) in out_block.chunks_mut(c).zip(cs_block) {
                for (ch, o) in row.iter_mut().enumerate() {
                    let base = ch * vol;
                    *o = corners.iter().map(|&(i, w)| w * g[base + i]).sum();
                }
            }
        });
    out
}

/// Trilinear interpolation of `grid [C, X, Y, Z]` at continuous grid
/// coordinates `coords [N, 3]` (clamped to `[0, dim-1]`). Returns `[N, C]`.
pub fn trilinear_sample_tensor(grid: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (c, dims) = grid_dims(grid)?;
    let cs = point_corners(coords, dims)?;
    let vol = dims.iter().product();
    Ok(Tensor::from_parts(vec![cs.len(), c], gather(grid, c, vol, &cs)))
}

/// Per-output-index `(lo, hi, frac)` source weights for resizing an axis of
/// length `n_in` to `n_out` with half-voxel-centre alignment.
pub fn resize_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| axis_weights((o as f64 + 0.5) * scale - 0.5, n_in))
        .collect()
}

impl<'t> Var<'t> {
    /// Trilinear lookup of this `[C, X, Y, Z]` grid at fixed coordinates.
    ///
    /// Differentiable with respect to the grid only; coordinates are data.
    pub fn trilinear_sample(self, coords: &Tensor) -> Result<Var<'t>> {
        let grid = self.value();
        let (c, dims) = grid_dims(&grid)?;
        let cs = point_corners(coords, dims)?;
        let vol: usize = dims.iter().product();
        let value = Tensor::from_parts(vec![cs.len(), c], gather(&grid, c, vol, &cs));
        let grid_shape = grid.shape().to_vec();
        Ok(self.tape.custom(&[self], value, move |g, _| {
            let mut gg = vec![0.0; c * vol];
            for (row, corners) in g.data().chunks(c).zip(&cs) {
                for (ch, &gv) in row.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let base = ch * vol;
                    for &(i, w) in corners {
                        gg[base + i] += w * gv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(grid_shape.clone(), gg))]
        }))
    }

    /// Trilinear resize of `[C, X, Y, Z]` to `[C, out[0], out[1], out[2]]`.
    pub fn resize_trilinear(self, out: [usize; 3]) -> Result<Var<'t>> {
        let x = self.value();
        let (c, dims) = grid_dims(&x)?;
        if out.iter().any(|&d| d == 0) {
            return Err(AutodiffError::IncompatibleGeometry(format!("resize target {out:?}")));
        }
        let wx = resize_weights(dims[0], out[0]);
        let wy = resize_weights(dims[1], out[1]);
        let wz = resize_weights(dims[2], out[2]);
        let in_vol: usize = dims.iter().product();
        let out_vol: usize = out.iter().product();
        let taps = move |ox: usize, oy: usize, oz: usize| {
            let (x0, x1, fx) = wx[ox];
            let (y0, y1, fy) = wy[oy];
            let (z0, z1, fz) = wz[oz];
            let mut t = [(0usize, 0.0f64); 8];
            let mut s = 0;
            for (xi, a) in [(x0, 1.0 - fx), (x1, fx)] {
                for (yi, b) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (zi, cw) in [(z0, 1.0 - fz), (z1, fz)] {
                        t[s] = ((xi * dims[1] + yi) * dims[2] + zi, a * b * cw);
                        s += 1;
                    }
                }
            }
            t
        };
        let mut table = Vec::with_capacity(out_vol);
        for ox in 0..out[0] {
            for oy in 0..out[1] {
                for oz in 0..out[2] {
                    table.push(taps(ox, oy, oz));
                }
            }
        }
        let mut data = vec![0.0; c * out_vol];
        for ch in 0..c {
            let src = &x.data()[ch * in_vol..(ch + 1) * in_vol];
            for (o, t) in data[ch * out_vol..(ch + 1) * out_vol].iter_mut().zip(&table) {
                *o = t.iter().map(|&(i, w)| w * src[i]).sum();
            }
        }
        let value = Tensor::from_parts(vec![c, out[0], out[1], out[2]], data);
        let in_shape = x.shape().to_vec();
        Ok(self.tape.custom(&[self], value, move |g, _| {
            let mut gi = vec![0.0; c * in_vol];
            for ch in 0..c {
                let dst = &mut gi[ch * in_vol..(ch + 1) * in_vol];
                for (gv, t) in g.data()[ch * out_vol..(ch + 1) * out_vol].iter().zip(&table) {
                    for &(i, w) in t {
                        dst[i] += w * gv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gi))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent 8-corner blend written against explicit floor/ceil.
    fn naive(grid: &Tensor, p: [f64; 3]) -> Vec<f64> {
        let [c, x, y, z]: [usize; 4] = grid.shape().try_into().unwrap();
        let dims = [x, y, z];
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut f = [0f64; 3];
        for a in 0..3 {
            let v = p[a].clamp(0.0, (dims[a] - 1) as f64);
            lo[a] = v.floor() as usize;
            hi[a] = v.ceil() as usize;
            f[a] = v - lo[a] as f64;
        }
        let at = |ch: usize, i: usize, j: usize, k: usize| grid.data()[((ch * x + i) * y + j) * z + k];
        (0..c)
            .map(|ch| {
                let mut acc = 0.0;
                for (i, wi) in [(lo[0], 1.0 - f[0]), (hi[0], f[0])] {
                    for (j, wj) in [(lo[1], 1.0 - f[1]), (hi[1], f[1])] {
                        for (k, wk) in [(lo[2], 1.0 - f[2]), (hi[2], f[2])] {
                            acc += wi * wj * wk * at(ch, i, j, k);
                        }
                    }
                }
                acc
            })
            .collect()
    }

    #[test]
    fn node_and_cell_centre() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Tensor::randn(vec![2, 3, 3, 3], 1.0, &mut rng);
        let coords = Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.0, 0.5, 0.5, 0.5]).unwrap();
        let out = trilinear_sample_tensor(&grid, &coords).unwrap();
        for ch in 0..2 {
            assert_eq!(out.data()[ch], grid.data()[ch * 27 + 15]);
            let corners: f64 = [0, 1, 3, 4, 9, 10, 12, 13].iter().map(|i| grid.data()[ch * 27 + i]).sum();
            assert!((out.data()[2 + ch] - corners / 8.0).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = Tensor::randn(vec![4, 5, 6, 7], 1.0, &mut rng);
        let pts: Vec<f64> = (0..100)
            .flat_map(|_| [rng.gen_range(-1.0..5.0), rng.gen_range(-1.0..6.0), rng.gen_range(-1.0..7.0)])
            .collect();
        let coords = Tensor::new(vec![100, 3], pts.clone()).unwrap();
        let out = trilinear_sample_tensor(&grid, &coords).unwrap();
        for (n, p) in pts.chunks(3).enumerate() {
            let expect = naive(&grid, [p[0], p[1], p[2]]);
            for ch in 0..4 {
                assert!((out.data()[n * 4 + ch] - expect[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nan_coordinate_is_error() {
        let grid = Tensor::zeros(vec![1, 2, 2, 2]);
        let coords = Tensor::new(vec![1, 3], vec![0.0, f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            trilinear_sample_tensor(&grid, &coords),
            Err(AutodiffError::NonFiniteCoordinate)
        ));
    }

    #[test]
    fn resize_preserves_constants() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 2, 3, 2], 1.5));
        let y = x.resize_trilinear([6, 4, 5]).unwrap();
        assert_eq!(y.shape(), vec![2, 6, 4, 5]);
        assert!(y.value().data().iter().all(|v| (v - 1.5).abs() < 1e-14));
    }
}

use rayon::prelude::*;

use crate::error::{AutodiffError, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Output extent of a strided convolution along one axis (floor semantics).
pub fn conv3d_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = input + 2 * pad;
    if span < kernel {
        return Err(AutodiffError::IncompatibleGeometry(format!(
            "kernel {kernel} larger than padded extent {span}"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    /// Output indices `o` along an axis for which `o*stride + koff - pad` is in bounds.
    fn valid(&self, axis: usize, koff: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let koff = koff as isize;
        let n_in = self.input[axis] as isize;
        let lo = (p - koff).max(0);
        let lo = (lo + s - 1) / s;
        let hi_num = n_in - 1 + p - koff;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        let hi = hi.min(self.output[axis] as isize);
        (lo as usize, (hi.max(lo)) as usize)
    }

    fn in_index(&self, o: usize, koff: usize) -> usize {
        o * self.stride + koff - self.pad
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }
}

fn forward(geo: &Geometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let [_, iy, iz] = geo.input;
    let [_, oy, oz] = geo.output;
    let k = geo.k;
    let k3 = k * k * k;
    let mut out = vec![0.0; geo.c_out * geo.out_vol()];
    out.par_chunks_mut(geo.out_vol()).enumerate().for_each(|(co, out_c)| {
        for ci in 0..geo.c_in {
            let in_c = &input[ci * geo.in_vol()..(ci + 1) * geo.in_vol()];
            let w_base = (co * geo.c_in + ci) * k3;
            for kx in 0..k {
                let (x0, x1) = geo.valid(0, kx);
                for ky in 0..k {
                    let (y0, y1) = geo.valid(1, ky);
                    for kz in 0..k {
                        let (z0, z1) = geo.valid(2, kz);
                        let w = kernel[w_base + (kx * k + ky) * k + kz];
                        if w == 0.0 || z0 >= z1 {
                            continue;
                        }
                        for ox in x0..x1 {
                            let ix = geo.in_index(ox, kx);
                            for oy_ in y0..y1 {
                                let iy_ = geo.in_index(oy_, ky);
                                let out_row = &mut out_c[(ox * oy + oy_) * oz..][..oz];
                                let in_row = &in_c[(ix * iy + iy_) * iz..][..iz];
                                if geo.stride == 1 {
                                    let off = kz as isize - geo.pad as isize;
                                    let src = &in_row[(z0 as isize + off) as usize..(z1 as isize + off) as usize];
                                    for (o, v) in out_row[z0..z1].iter_mut().zip(src) {
                                        *o += w * v;
                                    }
                                } else {
                                    for oz_ in z0..z1 {
                                        out_row[oz_] += w * in_row[geo.in_index(oz_, kz)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn backward_input(geo: &Geometry, grad: &[f64], kernel: &[f64]) -> Vec<f64> {
    let [_, iy, iz] = geo.input;
    let [_, oy, oz] = geo.output;
    let k = geo.k;
    let k3 = k * k * k;
    let mut gin = vec![0.0; geo.c_in * geo.in_vol()];
    gin.par_chunks_mut(geo.in_vol()).enumerate().for_each(|(ci, gin_c)| {
        for co in 0..geo.c_out {
            let g_c = &grad[co * geo.out_vol()..(co + 1) * geo.out_vol()];
            let w_base = (co * geo.c_in + ci) * k3;
            for kx in 0..k {
                let (x0, x1) = geo.valid(0, kx);
                for ky in 0..k {
                    let (y0, y1) = geo.valid(1, ky);
                    for kz in 0..k {
                        let (z0, z1) = geo.valid(2, kz);
                        let w = kernel[w_base + (kx * k + ky) * k + kz];
                        if w == 0.0 || z0 >= z1 {
                            continue;
                        }
                        for ox in x0..x1 {
                            let ix = geo.in_index(ox, kx);
                            for oy_ in y0..y1 {
                                let iy_ = geo.in_index(oy_, ky);
                                let g_row = &g_c[(ox * oy + oy_) * oz..][..oz];
                                let in_row = &mut gin_c[(ix * iy + iy_) * iz..][..iz];
                                for oz_ in z0..z1 {
                                    in_row[geo.in_index(oz_, kz)] += w * g_row[oz_];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

fn backward_kernel(geo: &Geometry, grad: &[f64], input: &[f64]) -> Vec<f64> {
    let [_, iy, iz] = geo.input;
    let [_, oy, oz] = geo.output;
    let k = geo.k;
    let k3 = k * k * k;
    let mut gw = vec![0.0; geo.c_out * geo.c_in * k3];
    gw.par_chunks_mut(geo.c_in * k3).enumerate().for_each(|(co, gw_co)| {
        let g_c = &grad[co * geo.out_vol()..(co + 1) * geo.out_vol()];
        for ci in 0..geo.c_in {
            let in_c = &input[ci * geo.in_vol()..(ci + 1) * geo.in_vol()];
            for kx in 0..k {
                let (x0, x1) = geo.valid(0, kx);
                for ky in 0..k {
                    let (y0, y1) = geo.valid(1, ky);
                    for kz in 0..k {
                        let (z0, z1) = geo.valid(2, kz);
                        let mut acc = 0.0;
                        for ox in x0..x1 {
                            let ix = geo.in_index(ox, kx);
                            for oy_ in y0..y1 {
                                let iy_ = geo.in_index(oy_, ky);
                                let g_row = &g_c[(ox * oy + oy_) * oz..][..oz];
                                let in_row = &in_c[(ix * iy + iy_) * iz..][..iz];
                                for oz_ in z0..z1 {
                                    acc += g_row[oz_] * in_row[geo.in_index(oz_, kz)];
                                }
                            }
                        }
                        gw_co[ci * k3 + (kx * k + ky) * k + kz] = acc;
                    }
                }
            }
        }
    });
    gw
}

impl<'t> Var<'t> {
    /// 3D convolution of `[C_in, X, Y, Z]` with `[C_out, C_in, k, k, k]`.
    ///
    /// Output extents are `floor((n + 2*pad - k) / stride) + 1` per axis.
    pub fn conv3d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), kernel.value());
        let (c_in, input) = match x.shape() {
            [c, a, b, d] => (*c, [*a, *b, *d]),
            s => {
                return Err(AutodiffError::IncompatibleGeometry(format!(
                    "conv3d input must be rank 4, got {s:?}"
                )))
            }
        };
        let (c_out, k) = match w.shape() {
            [co, ci, k1, k2, k3] if *ci == c_in && k1 == k2 && k2 == k3 => (*co, *k1),
            s => {
                return Err(AutodiffError::IncompatibleGeometry(format!(
                    "kernel {s:?} does not fit input channels {c_in}"
                )))
            }
        };
        if k % 2 == 0 {
            return Err(AutodiffError::IncompatibleGeometry(format!("kernel size {k} must be odd")));
        }
        if !(1..=2).contains(&stride) {
            return Err(AutodiffError::IncompatibleGeometry(format!("stride {stride} not in {{1,2}}")));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv3d_output_extent(input[a], k, stride, pad)?;
        }
        let geo = Geometry {
            c_in,
            c_out,
            k,
            stride,
            pad,
            input,
            output,
        };
        let data = forward(&geo, x.data(), w.data());
        let value = Tensor::from_parts(vec![c_out, output[0], output[1], output[2]], data);
        Ok(self.tape.custom(&[self, kernel], value, move |g, need| {
            vec![
                need[0].then(|| Tensor::from_parts(x.shape().to_vec(), backward_input(&geo, g.data(), w.data()))),
                need[1].then(|| Tensor::from_parts(w.shape().to_vec(), backward_kernel(&geo, g.data(), x.data()))),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-fold loop over output voxel, input channel and kernel offset.
    fn naive(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [ci, xs, ys, zs] = x.shape().try_into().unwrap();
        let [co, _, k, _, _] = w.shape().try_into().unwrap();
        let o = |n: usize| (n + 2 * pad - k) / stride + 1;
        let (ox, oy, oz) = (o(xs), o(ys), o(zs));
        let mut out = vec![0.0; co * ox * oy * oz];
        for c in 0..co {
            for a in 0..ox {
                for b in 0..oy {
                    for d in 0..oz {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for p in 0..k {
                                for q in 0..k {
                                    for r in 0..k {
                                        let xi = (a * stride + p) as isize - pad as isize;
                                        let yi = (b * stride + q) as isize - pad as isize;
                                        let zi = (d * stride + r) as isize - pad as isize;
                                        if xi < 0 || yi < 0 || zi < 0 {
                                            continue;
                                        }
                                        let (xi, yi, zi) = (xi as usize, yi as usize, zi as usize);
                                        if xi >= xs || yi >= ys || zi >= zs {
                                            continue;
                                        }
                                        acc += w.data()[(((c * ci + i) * k + p) * k + q) * k + r]
                                            * x.data()[((i * xs + xi) * ys + yi) * zs + zi];
                                    }
                                }
                            }
                        }
                        out[((c * ox + a) * oy + b) * oz + d] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![co, ox, oy, oz], out).unwrap()
    }

    #[test]
    fn identity_kernel_copies_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = Tensor::randn(vec![2, 3, 3, 3], 1.0, &mut rng);
        let mut w = Tensor::zeros(vec![2, 2, 1, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let y = tape.constant(x.clone()).conv3d(tape.constant(w), 1, 0).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![1, 4, 4, 4]));
        let y = x.conv3d(tape.constant(Tensor::zeros(vec![3, 1, 3, 3, 3])), 1, 1).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(vec![2, 4, 4, 4], 1.0, &mut rng);
        let w = Tensor::randn(vec![3, 2, 3, 3, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).conv3d(tape.constant(w.clone()), 1, 1).unwrap();
        assert!(y.value().max_abs_diff(&naive(&x, &w, 1, 1)) < 1e-12);

        for (dims, pad) in [([6, 6, 6], 1), ([3, 5, 4], 1), ([5, 5, 5], 0)] {
            let x = Tensor::randn(vec![2, dims[0], dims[1], dims[2]], 1.0, &mut rng);
            let tape = Tape::new();
            let y = tape.constant(x.clone()).conv3d(tape.constant(w.clone()), 2, pad).unwrap();
            assert!(y.value().max_abs_diff(&naive(&x, &w, 2, pad)) < 1e-12);
        }
    }

    #[test]
    fn geometry_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![1, 2, 2, 2]));
        let w = tape.constant(Tensor::ones(vec![1, 1, 5, 5, 5]));
        assert!(matches!(x.conv3d(w, 1, 0), Err(AutodiffError::IncompatibleGeometry(_))));
        let w2 = tape.constant(Tensor::ones(vec![1, 1, 2, 2, 2]));
        assert!(x.conv3d(w2, 1, 0).is_err());
        let w3 = tape.constant(Tensor::ones(vec![1, 1, 1, 1, 1]));
        assert!(x.conv3d(w3, 3, 0).is_err());
    }
}

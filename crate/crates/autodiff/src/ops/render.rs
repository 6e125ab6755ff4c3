use crate::error::{AutodiffError, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    /// Exclusive cumulative product along the last axis:
    /// `out[.., i] = prod_{j < i} x[.., j]`, so `out[.., 0] = 1`.
    pub fn cumprod_exclusive(self) -> Var<'t> {
        let x = self.value();
        let m = *x.shape().last().unwrap();
        let mut out = vec![0.0; x.numel()];
        for (xr, or) in x.data().chunks(m).zip(out.chunks_mut(m)) {
            let mut p = 1.0;
            for (o, v) in or.iter_mut().zip(xr) {
                *o = p;
                p *= v;
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let prefix = value.clone();
        self.tape.custom(&[self], value, move |g, _| {
            // d out_i / d x_j = prod_{l<i, l!=j} x_l for i > j. With
            // S_j = sum_{i>j} g_i prod_{j<l<i} x_l, grad_j = prefix_j * S_j and
            // S_j = g_{j+1} + x_{j+1} S_{j+1}; no division, safe at x = 0.
            let mut gx = vec![0.0; g.numel()];
            for (((gr, xr), pr), out) in g
                .data()
                .chunks(m)
                .zip(x.data().chunks(m))
                .zip(prefix.data().chunks(m))
                .zip(gx.chunks_mut(m))
            {
                let mut s = 0.0;
                for j in (0..m).rev() {
                    out[j] = pr[j] * s;
                    s = gr[j] + xr[j] * s;
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        })
    }

    /// Per-segment weighted sum: `weights [R, M]` against `values [R*M, C]`
    /// gives `[R, C]` with `out[r] = sum_i weights[r, i] * values[r*M + i]`.
    pub fn segment_weighted_sum(self, values: Var<'t>) -> Result<Var<'t>> {
        let (w, v) = (self.value(), values.value());
        let (r, m, c) = match (w.shape(), v.shape()) {
            ([r, m], [n, c]) if r * m == *n => (*r, *m, *c),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "segment_weighted_sum",
                    lhs: w.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; r * c];
        for ri in 0..r {
            let o = &mut out[ri * c..(ri + 1) * c];
            for i in 0..m {
                let wi = w.data()[ri * m + i];
                let row = &v.data()[(ri * m + i) * c..(ri * m + i + 1) * c];
                for (a, b) in o.iter_mut().zip(row) {
                    *a += wi * b;
                }
            }
        }
        Ok(self
            .tape
            .custom(&[self, values], Tensor::from_parts(vec![r, c], out), move |g, need| {
                let gw = need[0].then(|| {
                    let mut gw = vec![0.0; r * m];
                    for ri in 0..r {
                        let gr = &g.data()[ri * c..(ri + 1) * c];
                        for i in 0..m {
                            let row = &v.data()[(ri * m + i) * c..(ri * m + i + 1) * c];
                            gw[ri * m + i] = gr.iter().zip(row).map(|(a, b)| a * b).sum();
                        }
                    }
                    Tensor::from_parts(vec![r, m], gw)
                });
                let gv = need[1].then(|| {
                    let mut gv = vec![0.0; r * m * c];
                    for ri in 0..r {
                        let gr = &g.data()[ri * c..(ri + 1) * c];
                        for i in 0..m {
                            let wi = w.data()[ri * m + i];
                            for (o, gvv) in gv[(ri * m + i) * c..(ri * m + i + 1) * c].iter_mut().zip(gr) {
                                *o = wi * gvv;
                            }
                        }
                    }
                    Tensor::from_parts(vec![r * m, c], gv)
                });
                vec![gw, gv]
            }))
    }
}

use rayon::prelude::*;

use crate::error::{AutodiffError, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

const PAR_THRESHOLD: usize = 1 << 15;

/// `out[m,n] = a[m,k] * b[k,n]` on raw row-major buffers.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl<'t> Var<'t> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        };
        let value = Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n));
        Ok(self.tape.custom(&[self, other], value, move |g, need| {
            let ga = need[0].then(|| {
                let bt = transpose_raw(b.data(), k, n);
                Tensor::from_parts(vec![m, k], matmul_raw(g.data(), &bt, m, n, k))
            });
            let gb = need[1].then(|| {
                let at = transpose_raw(a.data(), m, k);
                Tensor::from_parts(vec![k, n], matmul_raw(&at, g.data(), k, m, n))
            });
            vec![ga, gb]
        }))
    }
}

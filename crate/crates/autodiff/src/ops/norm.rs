use crate::error::{AutodiffError, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

pub(crate) fn softmax_rows(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

impl<'t> Var<'t> {
    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let y = Tensor::from_parts(x.shape().to_vec(), softmax_rows(x.data(), n));
        let saved = y.clone();
        self.tape.custom(&[self], y, move |g, _| {
            let mut gx = vec![0.0; g.numel()];
            for ((gr, yr), out) in g.data().chunks(n).zip(saved.data().chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        })
    }

    /// Group normalisation of a channel-leading tensor `[C, ...]` without
    /// affine terms: each group of `C / groups` channels is standardised over
    /// its channels and all trailing positions.
    pub fn group_norm(self, groups: usize, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.shape()[0];
        if groups == 0 || c % groups != 0 {
            return Err(AutodiffError::InvalidArgument(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        let block = x.numel() / groups;
        let mut y = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; groups];
        for (gi, (xs, ys)) in x.data().chunks(block).zip(y.chunks_mut(block)).enumerate() {
            let mean = xs.iter().sum::<f64>() / block as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[gi] = is;
            for (o, v) in ys.iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), y);
        let normed = value.clone();
        Ok(self.tape.custom(&[self], value, move |g, _| {
            let mut gx = vec![0.0; g.numel()];
            for (gi, ((gs, ys), out)) in g
                .data()
                .chunks(block)
                .zip(normed.data().chunks(block))
                .zip(gx.chunks_mut(block))
                .enumerate()
            {
                let n = block as f64;
                let mean_g = gs.iter().sum::<f64>() / n;
                let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((o, gv), yv) in out.iter_mut().zip(gs).zip(ys) {
                    *o = inv_std[gi] * (gv - mean_g - yv * mean_gy);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 700.0]).unwrap());
        let y = x.softmax().value();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_standardises() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 3.0, 10.0, 30.0]).unwrap());
        let y = x.group_norm(2, 0.0).unwrap().value();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[3] - 1.0).abs() < 1e-12);
        assert!(x.group_norm(3, 1e-5).is_err());
    }
}

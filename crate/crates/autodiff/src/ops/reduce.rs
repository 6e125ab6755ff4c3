use crate::error::{AutodiffError, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.custom(&[self], Tensor::scalar(x.sum()), move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums a channel-leading `[C, ...]` tensor down to `[C]`.
    pub fn sum_channels(self) -> Var<'t> {
        let x = self.value();
        let c = x.shape()[0];
        let inner = x.numel() / c;
        let sums = x.data().chunks(inner).map(|ch| ch.iter().sum()).collect();
        let shape = x.shape().to_vec();
        self.tape.custom(&[self], Tensor::from_parts(vec![c], sums), move |g, _| {
            let data = g.data().iter().flat_map(|&v| std::iter::repeat(v).take(inner)).collect();
            vec![Some(Tensor::from_parts(shape.clone(), data))]
        })
    }

    /// Sums over the last axis: `[..., n] -> [...]` (a rank-1 input gives `[1]`).
    pub fn sum_last(self) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let mut out_shape = x.shape()[..x.rank() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let sums = x.data().chunks(n).map(|r| r.iter().sum()).collect();
        let shape = x.shape().to_vec();
        self.tape.custom(&[self], Tensor::from_parts(out_shape, sums), move |g, _| {
            let data = g.data().iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
            vec![Some(Tensor::from_parts(shape.clone(), data))]
        })
    }

    /// Picks `x[i, labels[i]]` from a `[N, K]` var, giving `[N]`.
    pub fn pick(self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let [n, k] = x.shape() else {
            return Err(AutodiffError::InvalidArgument("pick expects [N, K]".into()));
        };
        let (n, k) = (*n, *k);
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(AutodiffError::InvalidArgument(format!(
                "labels must be {n} indices below {k}"
            )));
        }
        let data = labels.iter().enumerate().map(|(i, &l)| x.data()[i * k + l]).collect();
        let labels = labels.to_vec();
        Ok(self.tape.custom(&[self], Tensor::from_parts(vec![n], data), move |g, _| {
            let mut gx = vec![0.0; n * k];
            for (i, (&l, gv)) in labels.iter().zip(g.data()).enumerate() {
                gx[i * k + l] = *gv;
            }
            vec![Some(Tensor::from_parts(vec![n, k], gx))]
        }))
    }
}

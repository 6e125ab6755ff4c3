use crate::error::{AutodiffError, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offset for every destination element of a permutation.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(axes).map(|(&i, &a)| i * src_strides[a]).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

impl<'t> Var<'t> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let value = x.reshape(shape.to_vec())?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.custom(&[self], value, move |g, _| {
            vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(AutodiffError::InvalidArgument(format!(
                "permutation {axes:?} invalid for rank {rank}"
            )));
        }
        let map = permute_map(x.shape(), axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let data = map.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::from_parts(out_shape, data);
        let in_shape = x.shape().to_vec();
        Ok(self.tape.custom(&[self], value, move |g, _| {
            let mut gx = vec![0.0; g.numel()];
            for (gv, &i) in g.data().iter().zip(&map) {
                gx[i] = *gv;
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        }))
    }

    /// Transpose of a rank-2 var.
    pub fn t(self) -> Result<Var<'t>> {
        self.permute(&[1, 0])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument("concat of nothing".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidArgument(format!("axis {axis} out of range")));
        }
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total / inner;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape.custom(parts, Tensor::from_parts(out_shape, data), move |g, need| {
            let mut offset = 0;
            shapes
                .iter()
                .zip(&widths)
                .zip(need)
                .map(|((shape, &w), &needed)| {
                    let start = offset;
                    offset += w;
                    needed.then(|| {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[o * total + start..o * total + start + w]);
                        }
                        Tensor::from_parts(shape.clone(), d)
                    })
                })
                .collect()
        }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(AutodiffError::InvalidArgument(format!(
                "narrow({axis}, {start}, {len}) on {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let row = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[o * row + start * inner..o * row + (start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.tape.custom(&[self], Tensor::from_parts(out_shape, data), move |g, _| {
            let mut gx = vec![0.0; outer * row];
            let w = len * inner;
            for o in 0..outer {
                gx[o * row + start * inner..o * row + start * inner + w].copy_from_slice(&g.data()[o * w..(o + 1) * w]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        }))
    }

    /// Selects rows of a `[N, D]` var; indices may repeat.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let [n, d] = x.shape() else {
            return Err(AutodiffError::InvalidArgument("gather_rows expects rank 2".into()));
        };
        let (n, d) = (*n, *d);
        if indices.iter().any(|&i| i >= n) || indices.is_empty() {
            return Err(AutodiffError::InvalidArgument("row index out of range".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
        }
        let idx = indices.to_vec();
        Ok(self
            .tape
            .custom(&[self], Tensor::from_parts(vec![indices.len(), d], data), move |g, _| {
                let mut gx = vec![0.0; n * d];
                for (row, &i) in g.data().chunks(d).zip(&idx) {
                    for (o, v) in gx[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, d], gx))]
            }))
    }
}

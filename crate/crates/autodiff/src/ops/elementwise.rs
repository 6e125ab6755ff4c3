use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::ops::ensure_same_shape;
use crate::tape::Var;
use crate::tensor::Tensor;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    /// Unary op `y = f(x)` whose derivative is expressed through `(x, y)`.
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_saved = Rc::clone(&y);
        self.tape.custom(&[self], (*y).clone(), move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y_saved.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let value = a.zip_map(&b, |x, y| x + y)?;
        Ok(self
            .tape
            .custom(&[self, other], value, |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let value = a.zip_map(&b, |x, y| x - y)?;
        Ok(self
            .tape
            .custom(&[self, other], value, |g, _| vec![Some(g.clone()), Some(g.scale(-1.0))]))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let value = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.custom(&[self, other], value, move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g * y).unwrap()),
                need[1].then(|| g.zip_map(&a, |g, x| g * x).unwrap()),
            ]
        }))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let value = self.value().scale(s);
        self.tape.custom(&[self], value, move |g, _| vec![Some(g.scale(s))])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let value = self.value().map(|x| x + s);
        self.tape.custom(&[self], value, |g, _| vec![Some(g.clone())])
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(self) -> Var<'t> {
        self.neg().add_scalar(1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Adds `b` to every trailing block of `self`: `b`'s shape must equal a
    /// suffix of `self`'s shape (leading-axis broadcast).
    pub fn add_broadcast(self, b: Var<'t>) -> Result<Var<'t>> {
        let (x, bv) = (self.value(), b.value());
        let inner = suffix_len("add_broadcast", x.shape(), bv.shape())?;
        let mut out = (*x).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, v) in chunk.iter_mut().zip(bv.data()) {
                *o += v;
            }
        }
        let b_shape = bv.shape().to_vec();
        Ok(self.tape.custom(&[self, b], out, move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; inner];
                for chunk in g.data().chunks(inner) {
                    for (a, v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                Tensor::from_parts(b_shape.clone(), acc)
            });
            vec![Some(g.clone()), gb]
        }))
    }

    /// Multiplies every trailing block of `self` by `b` (leading-axis broadcast).
    pub fn mul_broadcast(self, b: Var<'t>) -> Result<Var<'t>> {
        let (x, bv) = (self.value(), b.value());
        let inner = suffix_len("mul_broadcast", x.shape(), bv.shape())?;
        let mut out = (*x).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, v) in chunk.iter_mut().zip(bv.data()) {
                *o *= v;
            }
        }
        Ok(self.tape.custom(&[self, b], out, move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for chunk in gx.data_mut().chunks_mut(inner) {
                    for (o, v) in chunk.iter_mut().zip(bv.data()) {
                        *o *= v;
                    }
                }
                gx
            });
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; inner];
                for (gc, xc) in g.data().chunks(inner).zip(x.data().chunks(inner)) {
                    for ((a, gv), xv) in acc.iter_mut().zip(gc).zip(xc) {
                        *a += gv * xv;
                    }
                }
                Tensor::from_parts(bv.shape().to_vec(), acc)
            });
            vec![gx, gb]
        }))
    }

    /// Adds a per-channel value `b[C]` to a channel-leading tensor `[C, ...]`.
    pub fn add_channel(self, b: Var<'t>) -> Result<Var<'t>> {
        let (x, bv) = (self.value(), b.value());
        let inner = channel_inner("add_channel", x.shape(), bv.shape())?;
        let mut out = (*x).clone();
        for (chunk, v) in out.data_mut().chunks_mut(inner).zip(bv.data()) {
            chunk.iter_mut().for_each(|o| *o += v);
        }
        let c = bv.numel();
        Ok(self.tape.custom(&[self, b], out, move |g, need| {
            let gb = need[1].then(|| {
                let sums = g.data().chunks(inner).map(|ch| ch.iter().sum()).collect();
                Tensor::from_parts(vec![c], sums)
            });
            vec![Some(g.clone()), gb]
        }))
    }

    /// Multiplies each channel of `[C, ...]` by `b[C]`.
    pub fn mul_channel(self, b: Var<'t>) -> Result<Var<'t>> {
        let (x, bv) = (self.value(), b.value());
        let inner = channel_inner("mul_channel", x.shape(), bv.shape())?;
        let mut out = (*x).clone();
        for (chunk, v) in out.data_mut().chunks_mut(inner).zip(bv.data()) {
            chunk.iter_mut().for_each(|o| *o *= v);
        }
        let c = bv.numel();
        Ok(self.tape.custom(&[self, b], out, move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for (chunk, v) in gx.data_mut().chunks_mut(inner).zip(bv.data()) {
                    chunk.iter_mut().for_each(|o| *o *= v);
                }
                gx
            });
            let gb = need[1].then(|| {
                let sums = g
                    .data()
                    .chunks(inner)
                    .zip(x.data().chunks(inner))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::from_parts(vec![c], sums)
            });
            vec![gx, gb]
        }))
    }
}

fn suffix_len(op: &'static str, x: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() > x.len() || x[x.len() - b.len()..] != *b {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: x.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(b.iter().product())
}

fn channel_inner(op: &'static str, x: &[usize], b: &[usize]) -> Result<usize> {
    ensure_same_shape(op, &x[..1], b)?;
    Ok(x[1..].iter().product())
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn softplus_matches_closed_form() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_slice(&[0.0, 2.0, -40.0, 40.0]));
        let y = x.softplus().value();
        assert!((y.data()[0] - 2f64.ln()).abs() < 1e-15);
        assert!((y.data()[1] - (1.0 + 2f64.exp()).ln()).abs() < 1e-12);
        assert!(y.data()[2] > 0.0 && y.data()[2] < 1e-17);
        assert!((y.data()[3] - 40.0).abs() < 1e-12);
    }

    #[test]
    fn broadcast_rejects_non_suffix() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        assert!(x.add_broadcast(b).is_err());
    }
}

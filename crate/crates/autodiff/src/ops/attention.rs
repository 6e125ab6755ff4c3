//! Fused multi-head scaled dot-product attention.
//!
//! Attention probabilities are never materialised as a full matrix; each
//! query row is processed independently (and recomputed in the backward
//! pass), which keeps memory linear in the number of tokens.

use rayon::prelude::*;

use crate::error::{AutodiffError, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Which keys each query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionLayout {
    /// Every query attends to every key.
    Full,
    /// Queries and keys are split into consecutive blocks of this many rows;
    /// a query only attends within its own block. Requires `Nq == Nk`.
    Blocked(usize),
}

struct Dims {
    heads: usize,
    dk: usize,
    dv: usize,
    scale: f64,
}

impl Dims {
    fn qk_width(&self) -> usize {
        self.heads * self.dk
    }

    fn v_width(&self) -> usize {
        self.heads * self.dv
    }
}

/// `(query range, key range)` per block.
fn blocks(layout: AttentionLayout, nq: usize, nk: usize) -> Vec<((usize, usize), (usize, usize))> {
    match layout {
        AttentionLayout::Full => vec![((0, nq), (0, nk))],
        AttentionLayout::Blocked(b) => (0..nq / b).map(|i| ((i * b, (i + 1) * b), (i * b, (i + 1) * b))).collect(),
    }
}

fn row_probs(q_row: &[f64], k: &[f64], keys: (usize, usize), h: usize, d: &Dims, probs: &mut Vec<f64>) {
    probs.clear();
    let w = d.qk_width();
    let qh = &q_row[h * d.dk..(h + 1) * d.dk];
    let mut max = f64::NEG_INFINITY;
    for j in keys.0..keys.1 {
        let kh = &k[j * w + h * d.dk..j * w + (h + 1) * d.dk];
        let s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * d.scale;
        max = max.max(s);
        probs.push(s);
    }
    let mut total = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        total += *p;
    }
    probs.iter_mut().for_each(|p| *p /= total);
}

fn forward(q: &Tensor, k: &Tensor, v: &Tensor, d: &Dims, layout: AttentionLayout) -> Vec<f64> {
    let nq = q.shape()[0];
    let nk = k.shape()[0];
    let (qw, vw) = (d.qk_width(), d.v_width());
    let mut out = vec![0.0; nq * vw];
    let key_range = |i: usize| match layout {
        AttentionLayout::Full => (0, nk),
        AttentionLayout::Blocked(b) => (i / b * b, (i / b + 1) * b),
    };
    out.par_chunks_mut(vw).enumerate().for_each_init(Vec::new, |probs, (i, out_row)| {
        let keys = key_range(i);
        let q_row = &q.data()[i * qw..(i + 1) * qw];
        for h in 0..d.heads {
            row_probs(q_row, k.data(), keys, h, d, probs);
            let o = &mut out_row[h * d.dv..(h + 1) * d.dv];
            for (p, j) in probs.iter().zip(keys.0..keys.1) {
                let vh = &v.data()[j * vw + h * d.dv..j * vw + (h + 1) * d.dv];
                for (a, b) in o.iter_mut().zip(vh) {
                    *a += p * b;
                }
            }
        }
    });
    out
}

struct BlockGrads {
    gq: Vec<f64>,
    gk: Vec<f64>,
    gv: Vec<f64>,
}

fn backward_block(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    d: &Dims,
    queries: (usize, usize),
    keys: (usize, usize),
) -> BlockGrads {
    let (qw, vw) = (d.qk_width(), d.v_width());
    let nkb = keys.1 - keys.0;
    let mut out = BlockGrads {
        gq: vec![0.0; (queries.1 - queries.0) * qw],
        gk: vec![0.0; nkb * qw],
        gv: vec![0.0; nkb * vw],
    };
    let mut probs = Vec::with_capacity(nkb);
    let mut gp = vec![0.0; nkb];
    for i in queries.0..queries.1 {
        let q_row = &q.data()[i * qw..(i + 1) * qw];
        let g_row = &g.data()[i * vw..(i + 1) * vw];
        for h in 0..d.heads {
            row_probs(q_row, k.data(), keys, h, d, &mut probs);
            let gh = &g_row[h * d.dv..(h + 1) * d.dv];
            let mut dot = 0.0;
            for (jj, j) in (keys.0..keys.1).enumerate() {
                let vh = &v.data()[j * vw + h * d.dv..j * vw + (h + 1) * d.dv];
                gp[jj] = gh.iter().zip(vh).map(|(a, b)| a * b).sum();
                dot += probs[jj] * gp[jj];
                let gvh = &mut out.gv[jj * vw + h * d.dv..jj * vw + (h + 1) * d.dv];
                for (o, gv) in gvh.iter_mut().zip(gh) {
                    *o += probs[jj] * gv;
                }
            }
            let qh = &q_row[h * d.dk..(h + 1) * d.dk];
            let gq_off = (i - queries.0) * qw + h * d.dk;
            for (jj, j) in (keys.0..keys.1).enumerate() {
                let gs = probs[jj] * (gp[jj] - dot) * d.scale;
                if gs == 0.0 {
                    continue;
                }
                let kh = &k.data()[j * qw + h * d.dk..j * qw + (h + 1) * d.dk];
                for (o, kv) in out.gq[gq_off..gq_off + d.dk].iter_mut().zip(kh) {
                    *o += gs * kv;
                }
                for (o, qv) in out.gk[jj * qw + h * d.dk..jj * qw + (h + 1) * d.dk].iter_mut().zip(qh) {
                    *o += gs * qv;
                }
            }
        }
    }
    out
}

impl<'t> Var<'t> {
    /// Multi-head attention `softmax(Q K^T / sqrt(d_k)) V` with `heads`
    /// heads laid out as contiguous column groups.
    ///
    /// `self` is `Q [Nq, heads*d_k]`, `keys` is `[Nk, heads*d_k]`, `values` is
    /// `[Nk, heads*d_v]`; the result is `[Nq, heads*d_v]`.
    pub fn attention(self, keys: Var<'t>, values: Var<'t>, heads: usize, layout: AttentionLayout) -> Result<Var<'t>> {
        let (q, k, v) = (self.value(), keys.value(), values.value());
        let bad = |msg: &str| Err(AutodiffError::InvalidArgument(format!("attention: {msg}")));
        let ([nq, qw], [nk, kw], [nv, vw]) = (q.shape(), k.shape(), v.shape()) else {
            return bad("operands must be rank 2");
        };
        let (nq, nk) = (*nq, *nk);
        if heads == 0 || qw != kw || nk != *nv || qw % heads != 0 || vw % heads != 0 {
            return bad("inconsistent widths or head count");
        }
        if let AttentionLayout::Blocked(b) = layout {
            if b == 0 || nq != nk || nq % b != 0 {
                return bad("blocked layout needs Nq == Nk divisible by the block size");
            }
        }
        let dk = qw / heads;
        let dims = Dims {
            heads,
            dk,
            dv: vw / heads,
            scale: 1.0 / (dk as f64).sqrt(),
        };
        let value = Tensor::from_parts(vec![nq, dims.v_width()], forward(&q, &k, &v, &dims, layout));
        Ok(self.tape.custom(&[self, keys, values], value, move |g, need| {
            let (qt, kt, vt): (&Tensor, &Tensor, &Tensor) = (&q, &k, &v);
            let parts: Vec<_> = blocks(layout, nq, nk)
                .into_par_iter()
                .map(|(qr, kr)| (qr, kr, backward_block(qt, kt, vt, g, &dims, qr, kr)))
                .collect();
            let (qw, vw) = (dims.qk_width(), dims.v_width());
            let mut gq = vec![0.0; nq * qw];
            let mut gk = vec![0.0; nk * qw];
            let mut gv = vec![0.0; nk * vw];
            for (qr, kr, b) in parts {
                gq[qr.0 * qw..qr.1 * qw].copy_from_slice(&b.gq);
                for (o, x) in gk[kr.0 * qw..kr.1 * qw].iter_mut().zip(&b.gk) {
                    *o += x;
                }
                for (o, x) in gv[kr.0 * vw..kr.1 * vw].iter_mut().zip(&b.gv) {
                    *o += x;
                }
            }
            vec![
                need[0].then(|| Tensor::from_parts(vec![nq, qw], gq)),
                need[1].then(|| Tensor::from_parts(vec![nk, qw], gk)),
                need[2].then(|| Tensor::from_parts(vec![nk, vw], gv)),
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

    /// Explicit softmax(QK^T/sqrt(d))V per head, one block of keys per query.
    fn oracle(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, block: Option<usize>) -> Vec<f64> {
        let (nq, qw) = (q.shape()[0], q.shape()[1]);
        let (nk, vw) = (k.shape()[0], v.shape()[1]);
        let (dk, dv) = (qw / heads, vw / heads);
        let mut out = vec![0.0; nq * vw];
        for i in 0..nq {
            let (k0, k1) = match block {
                Some(b) => (i / b * b, i / b * b + b),
                None => (0, nk),
            };
            for h in 0..heads {
                let logits: Vec<f64> = (k0..k1)
                    .map(|j| (0..dk).map(|c| q.data()[i * qw + h * dk + c] * k.data()[j * qw + h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dv {
                    out[i * vw + h * dv + c] = (k0..k1).zip(&e).map(|(j, w)| w / z * v.data()[j * vw + h * dv + c]).sum();
                }
            }
        }
        out
    }

    #[test]
    fn full_and_blocked_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::randn(vec![6, 8], 1.0, &mut rng);
        let k = Tensor::randn(vec![6, 8], 1.0, &mut rng);
        let v = Tensor::randn(vec![6, 4], 1.0, &mut rng);
        for (layout, block) in [(AttentionLayout::Full, None), (AttentionLayout::Blocked(3), Some(3))] {
            let tape = Tape::new();
            let out = tape
                .constant(q.clone())
                .attention(tape.constant(k.clone()), tape.constant(v.clone()), 2, layout)
                .unwrap();
            let expect = oracle(&q, &k, &v, 2, block);
            for (a, b) in out.value().data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_block() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![5, 4]));
        assert!(x.attention(x, x, 2, AttentionLayout::Blocked(2)).is_err());
        assert!(x.attention(x, x, 3, AttentionLayout::Full).is_err());
    }
}

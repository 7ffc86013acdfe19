//! Causal grouped-query attention over packed segments.
//!
//! Queries, keys and values for several independent sequences are packed row
//! by row. Each [`Segment`] may sit on top of a constant key/value prefix (a
//! filled KV cache); prefix rows receive no gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    #[inline]
    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    #[inline]
    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    #[inline]
    fn group(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

/// A run of `len` packed rows starting at row `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Constant keys/values that precede a segment, `[len × kv_width]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct KvPrefix<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
    pub len: usize,
}

impl<T> KvPrefix<T> {
    pub fn empty() -> Self {
        Self {
            keys: Vec::new(),
            values: Vec::new(),
            len: 0,
        }
    }
}

struct Keys<'a, T> {
    prefix: &'a KvPrefix<T>,
    rows: &'a [T],
    start: usize,
    width: usize,
}

impl<'a, T> Keys<'a, T> {
    #[inline]
    fn at(&self, j: usize, offset: usize, dh: usize) -> &'a [T] {
        if j < self.prefix.len {
            &self.prefix.keys[j * self.width + offset..j * self.width + offset + dh]
        } else {
            let r = self.start + j - self.prefix.len;
            &self.rows[r * self.width + offset..r * self.width + offset + dh]
        }
    }

    #[inline]
    fn value_at(&self, values: &'a [T], j: usize, offset: usize, dh: usize) -> &'a [T] {
        if j < self.prefix.len {
            &self.prefix.values[j * self.width + offset..j * self.width + offset + dh]
        } else {
            let r = self.start + j - self.prefix.len;
            &values[r * self.width + offset..r * self.width + offset + dh]
        }
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Returns the attention output `[rows × q_width]` and the attention
/// probabilities, laid out segment by segment, row by row, head by head.
pub fn forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    shape: AttnShape,
    segments: &[Segment],
    prefixes: &[KvPrefix<T>],
) -> (Vec<T>, Vec<T>) {
    let dh = shape.head_dim;
    let qw = shape.q_width();
    let kw = shape.kv_width();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let rows = q.len() / qw;
    let mut out = vec![T::zero(); rows * qw];
    let mut probs = Vec::new();
    let mut scores = Vec::new();
    for (seg, prefix) in segments.iter().zip(prefixes) {
        let keys = Keys {
            prefix,
            rows: k,
            start: seg.start,
            width: kw,
        };
        for r in 0..seg.len {
            let row = seg.start + r;
            let visible = prefix.len + r + 1;
            for h in 0..shape.n_heads {
                let kv_off = (h / shape.group()) * dh;
                let qh = &q[row * qw + h * dh..row * qw + (h + 1) * dh];
                scores.clear();
                for j in 0..visible {
                    scores.push(dot(qh, keys.at(j, kv_off, dh)) * scale);
                }
                crate::tensor::softmax_in_place(&mut scores);
                let oh = &mut out[row * qw + h * dh..row * qw + (h + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vj = keys.value_at(v, j, kv_off, dh);
                    for (o, &x) in oh.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
                probs.extend_from_slice(&scores);
            }
        }
    }
    (out, probs)
}

/// Gradients with respect to `q`, `k` and `v`; prefixes are constants.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d_out: &[T],
    shape: AttnShape,
    segments: &[Segment],
    prefixes: &[KvPrefix<T>],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = shape.head_dim;
    let qw = shape.q_width();
    let kw = shape.kv_width();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = Vec::new();
    let mut cursor = 0;
    for (seg, prefix) in segments.iter().zip(prefixes) {
        let keys = Keys {
            prefix,
            rows: k,
            start: seg.start,
            width: kw,
        };
        for r in 0..seg.len {
            let row = seg.start + r;
            let visible = prefix.len + r + 1;
            for h in 0..shape.n_heads {
                let kv_off = (h / shape.group()) * dh;
                let p = &probs[cursor..cursor + visible];
                cursor += visible;
                let doh = &d_out[row * qw + h * dh..row * qw + (h + 1) * dh];
                dp.clear();
                let mut weighted = T::zero();
                for (j, &pj) in p.iter().enumerate() {
                    let g = dot(doh, keys.value_at(v, j, kv_off, dh));
                    weighted += pj * g;
                    dp.push(g);
                    if j >= prefix.len {
                        let kr = seg.start + j - prefix.len;
                        let dvj = &mut dv[kr * kw + kv_off..kr * kw + kv_off + dh];
                        for (d, &o) in dvj.iter_mut().zip(doh) {
                            *d += pj * o;
                        }
                    }
                }
                let qh = &q[row * qw + h * dh..row * qw + (h + 1) * dh];
                for (j, &pj) in p.iter().enumerate() {
                    let ds = pj * (dp[j] - weighted) * scale;
                    let kj = keys.at(j, kv_off, dh);
                    let dqh = &mut dq[row * qw + h * dh..row * qw + (h + 1) * dh];
                    for (d, &kv) in dqh.iter_mut().zip(kj) {
                        *d += ds * kv;
                    }
                    if j >= prefix.len {
                        let kr = seg.start + j - prefix.len;
                        let dkj = &mut dk[kr * kw + kv_off..kr * kw + kv_off + dh];
                        for (d, &qv) in dkj.iter_mut().zip(qh) {
                            *d += ds * qv;
                        }
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

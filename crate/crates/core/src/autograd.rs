//! Tape-based reverse-mode differentiation over [`Tensor`] operations.
//!
//! Every op appends one node holding its output value. `grad_of` walks the
//! nodes once in reverse creation order, which is a valid reverse topological
//! order because inputs always precede their consumers.

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{self, AttnShape, KvPrefix, Segment};
use crate::error::{Error, Result};
use crate::tensor::{self, dims2, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sum(Var),
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        gamma: Var,
        eps: f64,
    },
    Rope {
        x: Var,
        head_dim: usize,
        positions: Vec<usize>,
        theta: f64,
    },
    SwiGlu(Var, Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        segments: Vec<Segment>,
        prefixes: Vec<KvPrefix<T>>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = tensor::softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let out = tensor::rms_norm(self.value(x), self.value(gamma), eps)?;
        let rg = self.rg(&[x, gamma]);
        Ok(self.push(out, Op::RmsNorm { x, gamma, eps }, rg))
    }

    pub fn rope(&mut self, x: Var, head_dim: usize, positions: Vec<usize>, theta: f64) -> Result<Var> {
        let out = tensor::rope_rows(self.value(x), head_dim, &positions, theta)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                head_dim,
                positions,
                theta,
            },
            rg,
        ))
    }

    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        let out = tensor::swiglu(self.value(gate), self.value(up))?;
        let rg = self.rg(&[gate, up]);
        Ok(self.push(out, Op::SwiGlu(gate, up), rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let out = tensor::embedding(self.value(table), ids)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Causal attention; `prefixes[i]` holds constant keys/values in front of `segments[i]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        segments: Vec<Segment>,
        prefixes: Vec<KvPrefix<T>>,
    ) -> Result<Var> {
        let (rows, qw) = dims2(self.value(q), "attention")?;
        let (krows, kw) = dims2(self.value(k), "attention")?;
        if qw != shape.q_width() || kw != shape.kv_width() || krows != rows || self.value(v).shape() != self.value(k).shape() {
            return Err(Error::Shape {
                op: "attention",
                left: self.value(q).shape().to_vec(),
                right: self.value(k).shape().to_vec(),
            });
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if covered != rows || segments.len() != prefixes.len() {
            return Err(Error::InvalidTensor(alloc::format!(
                "attention segments cover {covered} of {rows} rows"
            )));
        }
        let (out, probs) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            shape,
            &segments,
            &prefixes,
        );
        let out = Tensor::new([rows, qw], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                segments,
                prefixes,
                probs,
            },
            rg,
        ))
    }

    /// Mean token cross-entropy over the rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let (loss, probs, count) = tensor::cross_entropy_parts(self.value(logits), targets, mask)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `params`.
    ///
    /// Parameters the loss does not depend on get an all-zero gradient.
    pub fn grad_of(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        for p in params {
            if !self.nodes[p.0].requires_grad {
                return Err(Error::DetachedParam(p.0));
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(params
            .iter()
            .map(|p| {
                grads
                    .get(p.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.value(*p).shape().to_vec()))
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let da = tensor::matmul_nt(g, self.value(*b))?;
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = tensor::matmul_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.requires_grad(*a) {
                    let da = tensor::matmul(g, self.value(*b))?;
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = tensor::matmul_tn(g, self.value(*a))?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.data()[0]));
            }
            Op::SoftmaxRows(x) => {
                let n = out.cols();
                let mut dx = g.data().to_vec();
                for (dr, yr) in dx.chunks_mut(n).zip(out.data().chunks(n)) {
                    let mut dot = T::zero();
                    for (&d, &y) in dr.iter().zip(yr) {
                        dot += d * y;
                    }
                    for (d, &y) in dr.iter_mut().zip(yr) {
                        *d = y * (*d - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::RmsNorm { x, gamma, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma).data();
                let d = xv.cols();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); d];
                let dn = T::lit(d as f64);
                for ((xr, gr), dxr) in xv.data().chunks(d).zip(g.data().chunks(d)).zip(dx.chunks_mut(d)) {
                    let inv = tensor::inv_rms(xr, *eps);
                    let mut s = T::zero();
                    for ((&xi, &gi), &dyi) in xr.iter().zip(gv).zip(gr) {
                        s += gi * dyi * xi;
                    }
                    let coef = inv * inv * inv * s / dn;
                    for (((dxi, &xi), &gi), (&dyi, dgi)) in dxr
                        .iter_mut()
                        .zip(xr)
                        .zip(gv)
                        .zip(gr.iter().zip(dg.iter_mut()))
                    {
                        *dxi = inv * gi * dyi - xi * coef;
                        *dgi += dyi * xi * inv;
                    }
                }
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.requires_grad(*gamma) {
                    let shape = self.value(*gamma).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(shape, dg)?);
                }
            }
            Op::Rope {
                x,
                head_dim,
                positions,
                theta,
            } => {
                let mut dx = g.data().to_vec();
                let width = dx.len() / positions.len();
                tensor::rope_in_place(&mut dx, width, *head_dim, positions, *theta, true)?;
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::SwiGlu(gate, up) => {
                let gv = self.value(*gate).data();
                let uv = self.value(*up).data();
                let mut dgate = Vec::with_capacity(gv.len());
                let mut dup = Vec::with_capacity(gv.len());
                for ((&gx, &ux), &dy) in gv.iter().zip(uv).zip(g.data()) {
                    let s = tensor::sigmoid(gx);
                    let silu = gx * s;
                    dup.push(dy * silu);
                    dgate.push(dy * ux * s * (T::one() + gx * (T::one() - s)));
                }
                let shape = g.shape().to_vec();
                if self.requires_grad(*gate) {
                    self.accumulate(grads, *gate, Tensor::new(shape.clone(), dgate)?);
                }
                if self.requires_grad(*up) {
                    self.accumulate(grads, *up, Tensor::new(shape, dup)?);
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = Tensor::zeros(tv.shape().to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id as usize * d..(id as usize + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                segments,
                prefixes,
                probs,
            } => {
                let (dq, dk, dv) = attention::backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g.data(),
                    *shape,
                    segments,
                    prefixes,
                );
                let qs = self.value(*q).shape().to_vec();
                let ks = self.value(*k).shape().to_vec();
                self.accumulate(grads, *q, Tensor::new(qs, dq)?);
                self.accumulate(grads, *k, Tensor::new(ks.clone(), dk)?);
                self.accumulate(grads, *v, Tensor::new(ks, dv)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let n = lv.cols();
                let scale = g.data()[0] / T::lit(*count as f64);
                let mut dl = vec![T::zero(); lv.len()];
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let dst = &mut dl[r * n..(r + 1) * n];
                    for (d, &p) in dst.iter_mut().zip(&probs[r * n..(r + 1) * n]) {
                        *d = p * scale;
                    }
                    dst[t as usize] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient_structure() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let x = tape.constant(Tensor::new([3, 1], vec![0.5, -1.0, 2.0]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.grad_of(loss, &[w]).unwrap();
        // d/dW sum(W x) = 1 · xᵀ
        assert_eq!(g[0].data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert_eq!(tape.grad_of(loss, &[x]).unwrap_err(), Error::DetachedParam(x.index()));
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::ones([2, 2]));
        let c = tape.constant(Tensor::ones([2, 2]));
        let loss = tape.sum(c);
        let g = tape.grad_of(loss, &[w]).unwrap();
        assert_eq!(g[0], Tensor::zeros([2, 2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::ones([2, 2]));
        assert_eq!(tape.grad_of(w, &[w]).unwrap_err(), Error::NonScalarLoss(vec![2, 2]));
    }
}

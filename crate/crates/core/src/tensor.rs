//! Dense row-major tensors and the forward kernels a Llama-style decoder needs.
//!
//! Every reduction runs left to right over its summed index, so results are
//! bit-reproducible for a given build. Kernels are generic over [`Real`] so the
//! same code path runs in `f32` for training and in `f64` for gradient checks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`].
pub trait Real:
    Float
    + Debug
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} must be non-empty with positive entries"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {expected} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    #[inline]
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all leading dimensions.
    #[inline]
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = dims2(self, "transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Sum of all elements, left to right.
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x;
        }
        acc
    }
}

pub(crate) fn dims2<T>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Shape {
            op,
            left: s.to_vec(),
            right: vec![0, 0],
        }),
    }
}

/// `a[m×k] · b[k×n]`, summing over `k` left to right.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm(a, k, 1, b, out, m, k, n);
}

const MR: usize = 4;
const NR: usize = 16;

/// One `R × NR` output tile summed over all of `k`.
#[inline(always)]
fn tile<T: Real, const R: usize>(a: &[T], rs: usize, ks: usize, b: &[T], n: usize, i: usize, j: usize, k: usize) -> [[T; NR]; R] {
    let mut acc = [[T::zero(); NR]; R];
    for kk in 0..k {
        let brow: &[T; NR] = b[kk * n + j..kk * n + j + NR].try_into().expect("tile width");
        for (r, acc_r) in acc.iter_mut().enumerate() {
            let av = a[(i + r) * rs + kk * ks];
            for c in 0..NR {
                acc_r[c] += av * brow[c];
            }
        }
    }
    acc
}

fn store<T: Real, const R: usize>(acc: [[T; NR]; R], out: &mut [T], n: usize, i: usize, j: usize) {
    for (r, acc_r) in acc.iter().enumerate() {
        out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(acc_r);
    }
}

/// `out = A·b` where `A[i][kk] = a[i * rs + kk * ks]`. Register-blocked, but
/// every output still accumulates its `k` products in ascending order from
/// zero, so results do not depend on the blocking.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(a: &[T], rs: usize, ks: usize, b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the running CPU supports AVX2.
        return unsafe { gemm_avx2(a, rs, ks, b, out, m, k, n) };
    }
    gemm_body(a, rs, ks, b, out, m, k, n)
}

// Same arithmetic with wider vectors; no FMA, so results are bit-identical.
#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_avx2<T: Real>(a: &[T], rs: usize, ks: usize, b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm_body(a, rs, ks, b, out, m, k, n)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_body<T: Real>(a: &[T], rs: usize, ks: usize, b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i < m {
        let rows = MR.min(m - i);
        let mut j = 0;
        while j + NR <= n {
            match rows {
                4 => store(tile::<T, 4>(a, rs, ks, b, n, i, j, k), out, n, i, j),
                3 => store(tile::<T, 3>(a, rs, ks, b, n, i, j, k), out, n, i, j),
                2 => store(tile::<T, 2>(a, rs, ks, b, n, i, j, k), out, n, i, j),
                _ => store(tile::<T, 1>(a, rs, ks, b, n, i, j, k), out, n, i, j),
            }
            j += NR;
        }
        if j < n {
            for r in 0..rows {
                let orow = &mut out[(i + r) * n + j..(i + r + 1) * n];
                orow.fill(T::zero());
                for kk in 0..k {
                    let av = a[(i + r) * rs + kk * ks];
                    for (o, &bv) in orow.iter_mut().zip(&b[kk * n + j..(kk + 1) * n]) {
                        *o += av * bv;
                    }
                }
            }
        }
        i += rows;
    }
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = dims2(a, "matmul_nt")?;
    let (_, k2) = dims2(b, "matmul_nt")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    matmul(a, &b.transpose()?)
}

/// `a[k×m]ᵀ · b[k×n]`, summing over `k` left to right.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = dims2(a, "matmul_tn")?;
    let (k2, n) = dims2(b, "matmul_tn")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    gemm(&a.data, 1, m, &b.data, &mut out, m, k, n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op: "add",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    })
}

/// Row-wise softmax over the last dimension with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.data.clone();
    for row in out.chunks_mut(x.cols()) {
        softmax_in_place(row);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

#[inline]
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Normalizes each row by its root mean square, then scales by `gamma`.
pub fn rms_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = x.cols();
    if gamma.len() != d {
        return Err(Error::Shape {
            op: "rms_norm",
            left: x.shape.clone(),
            right: gamma.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.data.chunks(d).zip(out.chunks_mut(d)) {
        let inv = inv_rms(xr, eps);
        for ((o, &xv), &g) in or.iter_mut().zip(xr).zip(&gamma.data) {
            *o = xv * inv * g;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

#[inline]
pub(crate) fn inv_rms<T: Real>(row: &[T], eps: f64) -> T {
    let mut ss = T::zero();
    for &v in row {
        ss += v * v;
    }
    let ms = ss / T::lit(row.len() as f64);
    T::one() / (ms + T::lit(eps)).sqrt()
}

/// Rotation angle for pair `pair` of a head of width `head_dim` at `position`.
#[inline]
pub(crate) fn rope_angle(position: usize, pair: usize, head_dim: usize, theta_base: f64) -> f64 {
    let inv_freq = libm::pow(theta_base, -((2 * pair) as f64) / head_dim as f64);
    position as f64 * inv_freq
}

/// Applies rotary position embedding to a `[heads × head_dim]` tensor.
pub fn rope_apply<T: Real>(x: &Tensor<T>, position: usize, theta_base: f64) -> Result<Tensor<T>> {
    let (_, head_dim) = dims2(x, "rope_apply")?;
    rope_rows(x, head_dim, &[position], theta_base)
}

/// Rotary embedding over rows of `[n × (heads·head_dim)]` (or `[n × heads × head_dim]`),
/// row `i` at absolute position `positions[i]`.
pub fn rope_rows<T: Real>(
    x: &Tensor<T>,
    head_dim: usize,
    positions: &[usize],
    theta_base: f64,
) -> Result<Tensor<T>> {
    let mut out = x.data.clone();
    rope_in_place(&mut out, x.len() / positions.len().max(1), head_dim, positions, theta_base, false)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

pub(crate) fn rope_in_place<T: Real>(
    data: &mut [T],
    width: usize,
    head_dim: usize,
    positions: &[usize],
    theta_base: f64,
    inverse: bool,
) -> Result<()> {
    if head_dim % 2 != 0 {
        return Err(Error::OddHeadDim(head_dim));
    }
    if head_dim == 0 || width % head_dim != 0 || data.len() != width * positions.len() {
        return Err(Error::InvalidTensor(format!(
            "rope over {} elements with width {width}, head_dim {head_dim}, {} positions",
            data.len(),
            positions.len()
        )));
    }
    let pairs = head_dim / 2;
    let mut cs: Vec<(T, T)> = vec![(T::one(), T::zero()); pairs];
    for (row, &pos) in data.chunks_mut(width).zip(positions) {
        for (p, c) in cs.iter_mut().enumerate() {
            let a = rope_angle(pos, p, head_dim, theta_base);
            let s = if inverse { -libm::sin(a) } else { libm::sin(a) };
            *c = (T::lit(libm::cos(a)), T::lit(s));
        }
        for head in row.chunks_mut(head_dim) {
            for (pair, &(c, s)) in head.chunks_mut(2).zip(&cs) {
                let (x0, x1) = (pair[0], pair[1]);
                pair[0] = x0 * c - x1 * s;
                pair[1] = x0 * s + x1 * c;
            }
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `silu(gate) ⊙ up`, the gated FFN nonlinearity.
pub fn swiglu<T: Real>(gate: &Tensor<T>, up: &Tensor<T>) -> Result<Tensor<T>> {
    if gate.shape != up.shape {
        return Err(Error::Shape {
            op: "swiglu",
            left: gate.shape.clone(),
            right: up.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: gate.shape.clone(),
        data: gate
            .data
            .iter()
            .zip(&up.data)
            .map(|(&g, &u)| g * sigmoid(g) * u)
            .collect(),
    })
}

/// Gathers rows of `table` for each id.
pub fn embedding<T: Real>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>> {
    let (vocab, d) = dims2(table, "embedding")?;
    if ids.is_empty() {
        return Err(Error::EmptyInput("embedding ids"));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id_us = id as usize;
        if id_us >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        out.extend_from_slice(&table.data[id_us * d..(id_us + 1) * d]);
    }
    Ok(Tensor {
        shape: vec![ids.len(), d],
        data: out,
    })
}

/// Mean of `-log softmax(logits)[target]` over rows where `mask` is set.
pub fn masked_cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[u32], mask: &[bool]) -> Result<T> {
    Ok(cross_entropy_parts(logits, targets, mask)?.0)
}

/// Returns the loss and the row softmax probabilities.
pub(crate) fn cross_entropy_parts<T: Real>(
    logits: &Tensor<T>,
    targets: &[u32],
    mask: &[bool],
) -> Result<(T, Vec<T>, usize)> {
    let v = logits.cols();
    let rows = logits.rows();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Shape {
            op: "masked_cross_entropy",
            left: logits.shape.clone(),
            right: vec![targets.len(), mask.len()],
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut probs = logits.data.clone();
    let mut total = T::zero();
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let t = targets[r] as usize;
        if t >= v {
            return Err(Error::TokenOutOfRange {
                id: targets[r],
                vocab: v,
            });
        }
        let row = &mut probs[r * v..(r + 1) * v];
        // log-sum-exp on the raw logits keeps the loss exact for large margins
        let mut max = T::neg_infinity();
        for &x in row.iter() {
            if x > max {
                max = x;
            }
        }
        let mut z = T::zero();
        for &x in row.iter() {
            z += (x - max).exp();
        }
        total += z.ln() + max - row[t];
        softmax_in_place(row);
    }
    Ok((total / T::lit(count as f64), probs, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = rand_tensor(&mut rng, &[2, 5]);
        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let z = Tensor::<f64>::zeros([3, 4]);
        let r = rand_tensor(&mut rng, &[4, 2]);
        assert_eq!(matmul(&z, &r).unwrap(), Tensor::zeros([3, 2]));
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert_relative_eq!(c.data()[i * 2 + j], s, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn blocked_kernels_keep_the_naive_summation_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (m, k, n) in [(1, 1, 1), (3, 5, 7), (4, 3, 16), (9, 13, 33), (17, 64, 48), (5, 2, 15)] {
            let a = rand_tensor(&mut rng, &[m, k]);
            let b = rand_tensor(&mut rng, &[k, n]);
            let mut naive = vec![0.0f64; m * n];
            for i in 0..m {
                for kk in 0..k {
                    for j in 0..n {
                        naive[i * n + j] += a.data()[i * k + kk] * b.data()[kk * n + j];
                    }
                }
            }
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(matmul(&a, &b).unwrap().data()), bits(&naive), "{m}x{k}x{n}");
            let at = a.transpose().unwrap();
            assert_eq!(bits(matmul_tn(&at, &b).unwrap().data()), bits(&naive), "tn {m}x{k}x{n}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![4, 2]
            }
        );
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[5, 3]);
        let b = rand_tensor(&mut rng, &[5, 4]);
        let tn = matmul_tn(&a, &b).unwrap();
        let explicit = matmul(&a.transpose().unwrap(), &b).unwrap();
        assert_eq!(tn, explicit);
        let c = rand_tensor(&mut rng, &[4, 3]);
        let nt = matmul_nt(&a, &c).unwrap();
        assert_eq!(nt, matmul(&a, &c.transpose().unwrap()).unwrap());
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::new([1, 4], vec![2.0f64; 4]).unwrap();
        for &p in softmax_rows(&x).data() {
            assert_relative_eq!(p, 0.25, epsilon = 1e-12);
        }
        let x = Tensor::new([1, 2], vec![0.0f64, 3.0f64.ln()]).unwrap();
        let p = softmax_rows(&x);
        assert_relative_eq!(p.data()[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(p.data()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 7]);
        let shifted = Tensor::new([3, 7], x.data().iter().map(|v| v + 12.5).collect()).unwrap();
        let (a, b) = (softmax_rows(&x), softmax_rows(&shifted));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-6);
        }
        for row in a.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_cases() {
        let ones = Tensor::<f64>::ones([2, 5]);
        let g = Tensor::<f64>::ones([5]);
        assert_eq!(rms_norm(&ones, &g, 0.0).unwrap(), ones);
        let zeros = Tensor::<f64>::zeros([5]);
        assert_eq!(rms_norm(&ones, &zeros, 0.0).unwrap(), Tensor::zeros([2, 5]));
        let x = Tensor::new([1, 2], vec![3.0f64, 4.0]).unwrap();
        let y = rms_norm(&x, &Tensor::ones([2]), 0.0).unwrap();
        assert_relative_eq!(y.data()[0], 0.8485, epsilon = 1e-4);
        assert_relative_eq!(y.data()[1], 1.1314, epsilon = 1e-4);
        assert!(matches!(
            rms_norm(&x, &Tensor::ones([3]), 0.0),
            Err(Error::Shape { op: "rms_norm", .. })
        ));
    }

    #[test]
    fn rope_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 8]);
        assert_eq!(rope_apply(&x, 0, 10000.0).unwrap(), x);
        let y = rope_apply(&x, 17, 10000.0).unwrap();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((na - nb).abs() < 1e-6);
        }
        let unit = Tensor::new([1, 2], vec![1.0f64, 0.0]).unwrap();
        let r = rope_apply(&unit, 1, 10000.0).unwrap();
        assert_relative_eq!(r.data()[0], 1.0f64.cos(), epsilon = 1e-12);
        assert_relative_eq!(r.data()[1], 1.0f64.sin(), epsilon = 1e-12);
        let odd = Tensor::<f64>::zeros([2, 3]);
        assert_eq!(rope_apply(&odd, 1, 10000.0).unwrap_err(), Error::OddHeadDim(3));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = Tensor::<f64>::zeros([3, 10]);
        let loss = masked_cross_entropy(&uniform, &[1, 2, 3], &[true, true, false]).unwrap();
        assert_relative_eq!(loss, 10.0f64.ln(), epsilon = 1e-12);
        let mut confident = Tensor::<f64>::zeros([1, 4]);
        confident.data_mut()[2] = 100.0;
        let loss = masked_cross_entropy(&confident, &[2], &[true]).unwrap();
        assert!(loss < 1e-30);
        assert_eq!(
            masked_cross_entropy(&uniform, &[1, 2, 3], &[false; 3]).unwrap_err(),
            Error::EmptyMask
        );
    }
}

//! Dense row-major matrices and the forward kernels used by the model.
//!
//! Every kernel here has a differentiable counterpart on [`GradTape`](crate::tape::GradTape);
//! the tape reuses these functions for its forward values so that inference
//! with and without a tape is bit-identical.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", (rows.len(), cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(v: &[T]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor2<U> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows {
            return Err(Error::shape("slice_rows", self.shape(), (start, len)));
        }
        Ok(Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.cols {
            return Err(Error::shape("slice_cols", self.shape(), (start, len)));
        }
        let mut out = Self::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        Ok(out)
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Self::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            if p.rows != rows {
                return Err(Error::shape("concat_cols", (rows, offset), p.shape()));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + p.cols].copy_from_slice(p.row(r));
            }
            offset += p.cols;
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }
}

/// Inner product, summed in index order.
#[inline]
pub fn dot<T: Real>(u: &[T], v: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in u.iter().zip(v) {
        acc += a * b;
    }
    acc
}

#[inline]
pub fn norm<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// `a · b`
pub fn matmul<T: Real>(a: &Tensor2<T>, b: &Tensor2<T>) -> Result<Tensor2<T>> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == T::zero() {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`; entry `(i, j)` is `dot(a[i], b[j])`.
pub fn matmul_t<T: Real>(a: &Tensor2<T>, b: &Tensor2<T>) -> Result<Tensor2<T>> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_t", a.shape(), b.shape()));
    }
    let mut out = Tensor2::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`
pub fn t_matmul<T: Real>(a: &Tensor2<T>, b: &Tensor2<T>) -> Result<Tensor2<T>> {
    if a.rows != b.rows {
        return Err(Error::shape("t_matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor2::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let ar = a.row(k);
        let br = b.row(k);
        for (i, &aki) in ar.iter().enumerate() {
            if aki == T::zero() {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(br) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized<T> {
    pub vector: Vec<T>,
    /// Set when the input norm was at or below [`Real::EPS_NORM`]; the vector is then zero.
    pub degenerate: bool,
}

/// Writes `src / ‖src‖` into `dst` and returns the norm, or zeros `dst` when
/// the norm is degenerate.
#[inline]
pub fn normalize_into<T: Real>(src: &[T], dst: &mut [T]) -> (T, bool) {
    let n = norm(src);
    if !(n > T::EPS_NORM) {
        dst.iter_mut().for_each(|d| *d = T::zero());
        return (n, true);
    }
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s / n;
    }
    (n, false)
}

pub fn l2_normalize<T: Real>(v: &[T]) -> Normalized<T> {
    let mut out = vec![T::zero(); v.len()];
    let (_, degenerate) = normalize_into(v, &mut out);
    Normalized {
        vector: out,
        degenerate,
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Computed as the inner product of the two normalized vectors, which is the
/// same arithmetic the retrieval index and the model use.
pub fn cosine_sim<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_sim", (1, u.len()), (1, v.len())));
    }
    let nu = l2_normalize(u);
    let nv = l2_normalize(v);
    if nu.degenerate || nv.degenerate {
        return Err(Error::DegenerateNorm);
    }
    let s = dot(&nu.vector, &nv.vector);
    Ok(s.max(-T::one()).min(T::one()))
}

/// Row-wise softmax with max subtraction. A row containing NaN yields a NaN row.
pub fn softmax_rows<T: Real>(m: &Tensor2<T>) -> Tensor2<T> {
    let mut out = m.clone();
    for r in 0..m.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    if row.iter().any(|x| x.is_nan()) {
        row.iter_mut().for_each(|x| *x = T::nan());
        return;
    }
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `gain ⊙ (v − mean) / sqrt(var + ε) + bias` with the biased variance.
pub fn layer_norm<T: Real>(v: &[T], gain: &[T], bias: &[T]) -> Result<Vec<T>> {
    if v.len() != gain.len() || v.len() != bias.len() {
        return Err(Error::shape(
            "layer_norm",
            (1, v.len()),
            (gain.len(), bias.len()),
        ));
    }
    if v.len() < 2 {
        return Err(Error::shape("layer_norm", (1, v.len()), (1, 2)));
    }
    let mut out = vec![T::zero(); v.len()];
    layer_norm_into(v, gain, bias, &mut out);
    Ok(out)
}

/// Returns `(xhat, inv_std)` side values needed by the backward pass, writing
/// the normalized output into `out`.
#[inline]
pub(crate) fn layer_norm_into<T: Real>(v: &[T], gain: &[T], bias: &[T], out: &mut [T]) -> T {
    let n = T::from_usize(v.len());
    let mean = v.iter().copied().sum::<T>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + T::EPS_LN).sqrt();
    for i in 0..v.len() {
        out[i] = gain[i] * ((v[i] - mean) * inv_std) + bias[i];
    }
    inv_std
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `d/dx x·Φ(x) = Φ(x) + x·φ(x)`
#[inline]
pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn gelu<T: Real>(v: &[T]) -> Vec<T> {
    v.iter().map(|&x| gelu_scalar(x)).collect()
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1−p)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(alloc::format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(vec![T::one(); len]);
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    Ok((0..len)
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect())
}

//! Reverse-mode gradient tape.
//!
//! Operations are recorded in execution order together with the forward
//! values they need; [`GradTape::backward`] walks the record in exact reverse
//! order and accumulates parameter gradients additively into a
//! [`ParamStore`]. Gradients of frozen parameters are never accumulated.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{self, Tensor2};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor2<T>,
    pub grad: Tensor2<T>,
    pub frozen: bool,
}

/// Named parameters in registration order, each with a zero-initialized
/// gradient accumulator.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2<T>) -> ParamId {
        let (r, c) = value.shape();
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad: Tensor2::zeros(r, c),
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2<T> {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2<T> {
        &self.entries[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn scale_grads(&mut self, c: T) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= c);
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.data().len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: e.grad.cast(),
                    frozen: e.frozen,
                })
                .collect(),
        }
    }
}

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Mask(Var, Vec<T>),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    /// Scalar produced by an external function whose gradient was computed
    /// alongside its value.
    External(Var, Vec<T>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor2<T>,
    op: Op<T>,
}

#[derive(Clone, Debug, Default)]
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, t: Tensor2<T>) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_t(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::shape("add_row", av.shape(), bv.shape()));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, &b) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// Elementwise product with a constant mask of the same size.
    pub fn mask(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.data().len() {
            return Err(Error::shape("mask", av.shape(), (mask.len(), 1)));
        }
        let mut v = av.clone();
        for (x, &m) in v.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        Ok(self.push(v, Op::Mask(a, mask)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = tensor::softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    /// Row-wise layer normalization with `1×n` gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.shape() != (1, n) || bv.shape() != (1, n) || n < 2 {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let ones = vec![T::one(); n];
        let zeros = vec![T::zero(); n];
        let mut out = Tensor2::zeros(xv.rows(), n);
        let mut xhat = Tensor2::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            inv_std.push(tensor::layer_norm_into(
                xv.row(r),
                &ones,
                &zeros,
                xhat.row_mut(r),
            ));
            let (g, b) = (gv.data(), bv.data());
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = g[j] * xhat.get(r, j) + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: xhat.into_vec(),
                inv_std,
            },
        ))
    }

    /// Scales every row to unit norm; degenerate rows become zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor2::zeros(xv.rows(), xv.cols());
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let (n, degenerate) = tensor::normalize_into(xv.row(r), out.row_mut(r));
            norms.push(if degenerate { T::zero() } else { n });
        }
        self.push(out, Op::NormalizeRows { x, norms })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows(x, start)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor2<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor2::concat_cols(&refs)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor2::filled(1, 1, s), Op::Sum(x))
    }

    /// Records a scalar `value = f(x)` whose gradient `∂f/∂x` (same length as
    /// `x`) was computed by the caller.
    pub fn external_scalar(&mut self, x: Var, value: T, grad: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if grad.len() != xv.data().len() {
            return Err(Error::shape("external_scalar", xv.shape(), (grad.len(), 1)));
        }
        Ok(self.push(Tensor2::filled(1, 1, value), Op::External(x, grad)))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor2<T>>>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape("backward", self.value(loss).shape(), (1, 1)));
        }
        let mut grads: Vec<Option<Tensor2<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2::filled(1, 1, T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Accumulates `∂loss/∂param` into the store for every unfrozen parameter
    /// that was read onto this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let entry = store.entry_mut(*id);
                if !entry.frozen {
                    entry.grad.add_assign(&g)?;
                }
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor2<T>,
        grads: &mut [Option<Tensor2<T>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let da = tensor::matmul_t(g, self.value(*b))?;
                let db = tensor::t_matmul(self.value(*a), g)?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::MatMulT(a, b) => {
                let da = tensor::matmul(g, self.value(*b))?;
                let db = tensor::t_matmul(g, self.value(*a))?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(a, bias) => {
                let mut db = Tensor2::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, &x) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *bias, db)?;
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c))?;
            }
            Op::Mask(a, mask) => {
                let mut d = g.clone();
                for (x, &m) in d.data_mut().iter_mut().zip(mask) {
                    *x *= m;
                }
                accumulate(grads, *a, d)?;
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                for (x, &input) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *x *= tensor::gelu_grad_scalar(input);
                }
                accumulate(grads, *a, d)?;
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = tensor::dot(g.row(r), y.row(r));
                    for (j, x) in d.row_mut(r).iter_mut().enumerate() {
                        *x = y.get(r, j) * (g.get(r, j) - inner);
                    }
                }
                accumulate(grads, *a, d)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let nf = T::from_usize(n);
                let gv = self.value(*gain).data();
                let mut dx = Tensor2::zeros(g.rows(), n);
                let mut dgain = Tensor2::zeros(1, n);
                let mut dbias = Tensor2::zeros(1, n);
                let mut dxhat = vec![T::zero(); n];
                for r in 0..g.rows() {
                    let xh = &xhat[r * n..(r + 1) * n];
                    let gr = g.row(r);
                    for j in 0..n {
                        dgain.data_mut()[j] += gr[j] * xh[j];
                        dbias.data_mut()[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let sum_d = dxhat.iter().copied().sum::<T>();
                    let sum_dx = tensor::dot(&dxhat, xh);
                    let scale = inv_std[r] / nf;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = scale * (nf * dxhat[j] - sum_d - xh[j] * sum_dx);
                    }
                }
                accumulate(grads, *x, dx)?;
                accumulate(grads, *gain, dgain)?;
                accumulate(grads, *bias, dbias)?;
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut d = Tensor2::zeros(y.rows(), y.cols());
                for (r, &n) in norms.iter().enumerate().take(y.rows()) {
                    if n == T::zero() {
                        continue;
                    }
                    let inner = tensor::dot(g.row(r), y.row(r));
                    for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = (g.get(r, j) - y.get(r, j) * inner) / n;
                    }
                }
                accumulate(grads, *x, d)?;
            }
            Op::SliceRows(x, start) => {
                let (rows, cols) = self.value(*x).shape();
                let mut d = Tensor2::zeros(rows, cols);
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, d)?;
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = self.value(*x).shape();
                let mut d = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, d)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    accumulate(grads, p, g.slice_cols(offset, cols)?)?;
                    offset += cols;
                }
            }
            Op::Sum(x) => {
                let (rows, cols) = self.value(*x).shape();
                accumulate(grads, *x, Tensor2::filled(rows, cols, g.data()[0]))?;
            }
            Op::External(x, local) => {
                let (rows, cols) = self.value(*x).shape();
                let up = g.data()[0];
                let d = Tensor2::from_vec(rows, cols, local.iter().map(|&l| l * up).collect())?;
                accumulate(grads, *x, d)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor2<T>>], v: Var, d: Tensor2<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => {
            *slot = Some(d);
            Ok(())
        }
    }
}

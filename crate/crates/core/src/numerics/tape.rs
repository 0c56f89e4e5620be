//! Reverse-mode automatic differentiation over a node arena.
//!
//! Nodes are appended in evaluation order, so the arena index is already a
//! topological order and backward is a single reverse sweep. A tape supports
//! exactly one `backward`; a second call is rejected.

use crate::numerics::ops;
use crate::numerics::{NumericsError, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    MeanRows(Var),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when the node does not require a gradient or the root does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with zeros filled in for unreached nodes of the given shape.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = ops::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same_shape(vb, "add")?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.len() != va.cols() {
            return Err(mismatch("add_row", &[1, va.cols()], vr.shape()));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_slice_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same_shape(vb, "mul")?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = ops::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn layer_norm_rows(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    ) -> Result<Var, NumericsError> {
        let vx = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = vx.cols();
        if g.len() != n || b.len() != n {
            return Err(mismatch("layer_norm_rows", &[1, n], g.shape()));
        }
        let mut out = vx.clone();
        let mut xhat = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let (h, inv) = ops::normalize(vx.row_slice(r), eps);
            for (j, o) in out.row_slice_mut(r).iter_mut().enumerate() {
                *o = h[j] * g.data()[j] + b.data()[j];
            }
            xhat.extend_from_slice(&h);
            inv_std.push(inv);
        }
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Column means: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = S::from_usize_lossy(va.rows());
        let mut acc = vec![S::zero(); va.cols()];
        for r in 0..va.rows() {
            for (s, &x) in acc.iter_mut().zip(va.row_slice(r)) {
                *s += x;
            }
        }
        for s in &mut acc {
            *s /= m;
        }
        self.push(Tensor::row(acc), Op::MeanRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::InvalidArgument("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(mismatch("concat_rows", &[v.rows(), cols], v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::InvalidArgument("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(mismatch("concat_cols", &[rows, v.cols()], v.shape()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, NumericsError> {
        let va = self.value(a);
        if start + width > va.cols() {
            return Err(mismatch(
                "slice_cols",
                &[va.rows(), start + width],
                va.shape(),
            ));
        }
        let mut data = Vec::with_capacity(va.rows() * width);
        for r in 0..va.rows() {
            data.extend_from_slice(&va.row_slice(r)[start..start + width]);
        }
        let out = Tensor::matrix(va.rows(), width, data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Rows `start..start + len` as a `len x cols` matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let va = self.value(a);
        if start + len > va.rows() {
            return Err(mismatch(
                "slice_rows",
                &[start + len, va.cols()],
                va.shape(),
            ));
        }
        let out = va.slice_rows(start, len);
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    /// `-log softmax(logits)[label]` for a `1 x K` logit row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, NumericsError> {
        let v = self.value(logits);
        let loss = ops::cross_entropy(v.data(), label)?;
        let probs = ops::softmax_unchecked(v.data());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<S>, NumericsError> {
        let root_shape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(NumericsError::NonScalarRoot { shape: root_shape });
        }
        if self.backward_done {
            return Err(NumericsError::BackwardAlreadyRun);
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(&root_shape, S::one()));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<(), NumericsError> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(grads, *a, ops::matmul_bt(g, vb)?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, ops::matmul_at(va, g)?);
                }
            }
            Op::MatMulBt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(grads, *a, ops::matmul(g, vb)?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, ops::matmul_at(g, va)?);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(grads, *v, g.clone());
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*row) {
                    let mut acc = vec![S::zero(); g.cols()];
                    for r in 0..g.rows() {
                        for (s, &x) in acc.iter_mut().zip(g.row_slice(r)) {
                            *s += x;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    accumulate(grads, *row, Tensor::new(shape, acc)?);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, k) => {
                accumulate(grads, *a, g.map(|x| x * *k));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&dy, &t)| dy * (S::one() - t * t))
                    .collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&dy, &s)| dy * s * (S::one() - s))
                    .collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&dy, &v)| dy * ops::gelu_grad(v))
                    .collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (j, o) in d.row_slice_mut(r).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![S::zero(); n];
                    let mut db = vec![S::zero(); n];
                    for r in 0..g.rows() {
                        for j in 0..n {
                            let dy = g.data()[r * n + j];
                            dg[j] += dy * xhat[r * n + j];
                            db[j] += dy;
                        }
                    }
                    if self.wants(*gamma) {
                        let shape = self.value(*gamma).shape().to_vec();
                        accumulate(grads, *gamma, Tensor::new(shape, dg)?);
                    }
                    if self.wants(*beta) {
                        let shape = self.value(*beta).shape().to_vec();
                        accumulate(grads, *beta, Tensor::new(shape, db)?);
                    }
                }
                if self.wants(*x) {
                    let nf = S::from_usize_lossy(n);
                    let mut dx = vec![S::zero(); g.len()];
                    for r in 0..g.rows() {
                        let inv = inv_std[r];
                        let h = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<S> = (0..n).map(|j| g.data()[r * n + j] * gam[j]).collect();
                        let sum_dh: S = dh.iter().copied().sum();
                        let sum_dh_h: S = dh.iter().zip(h).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] = inv / nf * (nf * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let m = S::from_usize_lossy(va.rows());
                let mut d = Tensor::zeros(va.shape());
                for r in 0..va.rows() {
                    for (o, &x) in d.row_slice_mut(r).iter_mut().zip(g.data()) {
                        *o = x / m;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, Tensor::filled(va.shape(), g.data()[0]));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        let shape = self.value(p).shape().to_vec();
                        let piece = g.slice_rows(offset, rows).reshape(&shape)?;
                        accumulate(grads, p, piece);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        let shape = self.value(p).shape().to_vec();
                        accumulate(grads, p, Tensor::new(shape, data)?);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let w = g.cols();
                let mut d = Tensor::zeros(va.shape());
                for r in 0..g.rows() {
                    d.row_slice_mut(r)[*start..*start + w].copy_from_slice(g.row_slice(r));
                }
                accumulate(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let mut d = Tensor::zeros(va.shape());
                let c = g.cols();
                d.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                accumulate(grads, *a, d);
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let dy = g.data()[0];
                let mut d: Vec<S> = probs.iter().map(|&p| p * dy).collect();
                d[*label] -= dy;
                let shape = self.value(*logits).shape().to_vec();
                accumulate(grads, *logits, Tensor::new(shape, d)?);
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

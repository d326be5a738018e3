//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly, checks its result for non-finite
//! values and records a node on the tape. [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients into the reachable parameters.

use super::param::{ParamId, ParamStore};
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Concat(Vec<Var>, Axis),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Log(Var),
    Exp(Var),
    Sum(Var),
    PickSum(Var, Vec<(usize, usize)>),
    LogSumExp(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<S = f64> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar loss with respect to every node that requires one.
#[derive(Debug, Clone)]
pub struct Gradients<S = f64> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Param(_) => true,
            _ => self
                .parents(&op)
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op<S>) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Concat(parts, _) => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Scale(x, _)
            | Op::SliceRows(x, _)
            | Op::SliceCols(x, _)
            | Op::MeanRows(x, _)
            | Op::Gather(x, _)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Sum(x)
            | Op::PickSum(x, _)
            | Op::LogSumExp(x, _) => vec![*x],
        }
    }

    /// Differentiable input; its gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "constant" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// `a * b^T` for `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_bt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![S::zero(); m * n];
        matmul_bt_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul_bt", out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push("add", out, Op::Add(a, b))
    }

    /// Adds a row vector (length `cols`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push("add_row", out, Op::AddRow(x, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, Op::Scale(x, factor))
    }

    /// Concatenates 2-D tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let (r0, c0) = (self.value(first).rows(), self.value(first).cols());
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.cols() != c0 {
                        return Err(shape_err("concat", self.shape(first), v.shape()));
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor::new(vec![rows, c0], data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.rows() != r0 {
                        return Err(shape_err("concat", self.shape(first), v.shape()));
                    }
                    cols += v.cols();
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::new(vec![r0, cols], data)?
            }
        };
        self.push("concat", out, Op::Concat(parts.to_vec(), axis))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        if start + len > r || len == 0 {
            return Err(shape_err("slice_rows", v.shape(), &[start, len]));
        }
        let out = Tensor::new(
            vec![len, c],
            v.data()[start * c..(start + len) * c].to_vec(),
        )?;
        self.push("slice_rows", out, Op::SliceRows(x, start))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        if start + len > c || len == 0 {
            return Err(shape_err("slice_cols", v.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        self.push("slice_cols", out, Op::SliceCols(x, start))
    }

    /// Mean of the listed rows, as a `[1 x cols]` tensor.
    pub fn mean_pool(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(shape_err("mean_pool", v.shape(), rows));
        }
        let mut acc = vec![S::zero(); c];
        for &i in rows {
            for (a, &b) in acc.iter_mut().zip(v.row(i)) {
                *a += b;
            }
        }
        let inv = S::one() / S::of(rows.len() as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        let out = Tensor::new(vec![1, c], acc)?;
        self.push("mean_pool", out, Op::MeanRows(x, rows.to_vec()))
    }

    /// Row lookup: output row `i` is row `ids[i]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table);
        let (r, c) = (v.rows(), v.cols());
        if ids.iter().any(|&i| i >= r) {
            return Err(shape_err("gather", v.shape(), ids));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        self.push("gather", out, Op::Gather(table, ids.to_vec()))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| if v > S::zero() { v } else { S::zero() });
        self.push("relu", out, Op::Relu(x))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Row-wise softmax. Columns with `keep[j] == false` receive exactly zero
    /// probability, as if their logits were `-inf`.
    pub fn softmax_masked(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        if let Some(k) = keep {
            if k.len() != c {
                return Err(shape_err("softmax", v.shape(), &[k.len()]));
            }
            if !k.iter().any(|&b| b) {
                return Err(Error::Invalid("softmax: every column masked".into()));
            }
        }
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_row(row, keep);
        }
        self.push("softmax", out, Op::Softmax(x))
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<S>().ln();
            row.iter_mut().for_each(|z| *z -= lse);
        }
        self.push("log_softmax", out, Op::LogSoftmax(x))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// learned `gain` and `bias` (each of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm", v.shape(), self.shape(gain)));
        }
        let eps = S::of(LAYER_NORM_EPS);
        let n = S::of(c as f64);
        let mut xhat = Vec::with_capacity(v.len());
        let mut inv_std = Vec::with_capacity(v.rows());
        for row in v.data().chunks(c) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&z| (z - mean) * is));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let data = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &gv), &bv)| h * gv + bv))
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(S::ln);
        self.push("log", out, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(S::exp);
        self.push("exp", out, Op::Exp(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x))
    }

    /// Sum of the selected `(row, col)` entries, as a scalar.
    pub fn pick_sum(&mut self, x: Var, cells: &[(usize, usize)]) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        if cells.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(shape_err("pick_sum", v.shape(), &[cells.len()]));
        }
        let total = cells.iter().map(|&(i, j)| v.get(i, j)).sum();
        self.push(
            "pick_sum",
            Tensor::scalar(total),
            Op::PickSum(x, cells.to_vec()),
        )
    }

    /// `log(sum(exp(x[i])))` over the selected flat indices, as a scalar.
    pub fn log_sum_exp(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if indices.is_empty() || indices.iter().any(|&i| i >= v.len()) {
            return Err(shape_err("log_sum_exp", v.shape(), &[indices.len()]));
        }
        let d = v.data();
        let max = indices
            .iter()
            .map(|&i| d[i])
            .fold(S::neg_infinity(), S::max);
        let total: S = indices.iter().map(|&i| (d[i] - max).exp()).sum();
        let out = Tensor::scalar(max + total.ln());
        self.push("log_sum_exp", out, Op::LogSumExp(x, indices.to_vec()))
    }

    /// Sum of a list of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        match terms {
            [] => self.constant(Tensor::scalar(S::zero())),
            [first, rest @ ..] => {
                let mut acc = *first;
                for &t in rest {
                    acc = self.add(acc, t)?;
                }
                Ok(acc)
            }
        }
    }

    /// Reverse pass from the scalar `loss`. Parameter gradients are added to
    /// `store` (accumulating across calls); all node gradients are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) -> Result<Gradients<S>> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
        Ok(grads)
    }

    pub fn gradients(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[id];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Tensor<S>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if needs(a) {
                    let mut da = vec![S::zero(); m * k];
                    matmul_bt_into(g.data(), vb.data(), &mut da, m, n, k);
                    acc(*a, Tensor::new(vec![m, k], da).expect("shape"));
                }
                if needs(b) {
                    let mut db = vec![S::zero(); k * n];
                    matmul_at_into(va.data(), g.data(), &mut db, k, m, n);
                    acc(*b, Tensor::new(vec![k, n], db).expect("shape"));
                }
            }
            Op::MatMulBt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if needs(a) {
                    let mut da = vec![S::zero(); m * k];
                    matmul_into(g.data(), vb.data(), &mut da, m, n, k);
                    acc(*a, Tensor::new(vec![m, k], da).expect("shape"));
                }
                if needs(b) {
                    let mut db = vec![S::zero(); n * k];
                    matmul_at_into(g.data(), va.data(), &mut db, n, m, k);
                    acc(*b, Tensor::new(vec![n, k], db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    acc(*a, g.clone());
                }
                if needs(b) {
                    acc(*b, g.clone());
                }
            }
            Op::AddRow(x, bias) => {
                if needs(x) {
                    acc(*x, g.clone());
                }
                if needs(bias) {
                    let c = g.cols();
                    let mut db = vec![S::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    acc(*bias, Tensor::new(shape, db).expect("shape"));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let d = zip_map(g, self.value(*b), |x, y| x * y);
                    acc(*a, d);
                }
                if needs(b) {
                    let d = zip_map(g, self.value(*a), |x, y| x * y);
                    acc(*b, d);
                }
            }
            Op::Scale(x, f) => {
                if needs(x) {
                    let f = *f;
                    acc(*x, g.map(|v| v * f));
                }
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let (pr, pc) = (pv.rows(), pv.cols());
                    if needs(p) {
                        let d = match axis {
                            Axis::Rows => g.data()[offset * pc..(offset + pr) * pc].to_vec(),
                            Axis::Cols => (0..pr)
                                .flat_map(|r| g.row(r)[offset..offset + pc].iter().copied())
                                .collect(),
                        };
                        acc(*p, Tensor::new(pv.shape().to_vec(), d).expect("shape"));
                    }
                    offset += match axis {
                        Axis::Rows => pr,
                        Axis::Cols => pc,
                    };
                }
            }
            Op::SliceRows(x, start) => {
                if needs(x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut d = Tensor::zeros(xv.shape());
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(*x, d);
                }
            }
            Op::SliceCols(x, start) => {
                if needs(x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let len = g.cols();
                    let mut d = Tensor::zeros(xv.shape());
                    for r in 0..xv.rows() {
                        d.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                    }
                    acc(*x, d);
                }
            }
            Op::MeanRows(x, rows) => {
                if needs(x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let inv = S::one() / S::of(rows.len() as f64);
                    let mut d = Tensor::zeros(xv.shape());
                    for &r in rows {
                        for (o, &gv) in d.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g.data()) {
                            *o += gv * inv;
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::Gather(table, ids) => {
                if needs(table) {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    let mut d = Tensor::zeros(tv.shape());
                    for (i, &r) in ids.iter().enumerate() {
                        for (o, &gv) in d.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                    acc(*table, d);
                }
            }
            Op::Relu(x) => {
                if needs(x) {
                    let d = zip_map(g, self.value(*x), |gv, xv| {
                        if xv > S::zero() {
                            gv
                        } else {
                            S::zero()
                        }
                    });
                    acc(*x, d);
                }
            }
            Op::Softmax(x) => {
                if needs(x) {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = Tensor::zeros(y.shape());
                    for ((dr, yr), gr) in d
                        .data_mut()
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(g.data().chunks(c))
                    {
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::LogSoftmax(x) => {
                if needs(x) {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = Tensor::zeros(y.shape());
                    for ((dr, yr), gr) in d
                        .data_mut()
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(g.data().chunks(c))
                    {
                        let gsum: S = gr.iter().copied().sum();
                        for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = gv - yv.exp() * gsum;
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = g.cols();
                let gv = self.value(*gain).data();
                if needs(x) {
                    let n = S::of(c as f64);
                    let mut d = Vec::with_capacity(g.len());
                    for ((gr, hr), &is) in g.data().chunks(c).zip(xhat.chunks(c)).zip(inv_std) {
                        let dh: Vec<S> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let sum_dh: S = dh.iter().copied().sum();
                        let sum_dh_h: S = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        for (&dhv, &hv) in dh.iter().zip(hr) {
                            d.push(is / n * (n * dhv - sum_dh - hv * sum_dh_h));
                        }
                    }
                    acc(*x, Tensor::new(g.shape().to_vec(), d).expect("shape"));
                }
                if needs(gain) {
                    let mut dg = vec![S::zero(); c];
                    for (gr, hr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for ((o, &a), &b) in dg.iter_mut().zip(gr).zip(hr) {
                            *o += a * b;
                        }
                    }
                    let shape = self.shape(*gain).to_vec();
                    acc(*gain, Tensor::new(shape, dg).expect("shape"));
                }
                if needs(bias) {
                    let mut db = vec![S::zero(); c];
                    for gr in g.data().chunks(c) {
                        for (o, &a) in db.iter_mut().zip(gr) {
                            *o += a;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    acc(*bias, Tensor::new(shape, db).expect("shape"));
                }
            }
            Op::Log(x) => {
                if needs(x) {
                    acc(*x, zip_map(g, self.value(*x), |gv, xv| gv / xv));
                }
            }
            Op::Exp(x) => {
                if needs(x) {
                    acc(*x, zip_map(g, &node.value, |gv, yv| gv * yv));
                }
            }
            Op::Sum(x) => {
                if needs(x) {
                    acc(*x, Tensor::full(self.shape(*x), g.item()));
                }
            }
            Op::PickSum(x, cells) => {
                if needs(x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut d = Tensor::zeros(xv.shape());
                    for &(i, j) in cells {
                        d.data_mut()[i * c + j] += g.item();
                    }
                    acc(*x, d);
                }
            }
            Op::LogSumExp(x, indices) => {
                if needs(x) {
                    let xv = self.value(*x);
                    let lse = node.value.item();
                    let mut d = Tensor::zeros(xv.shape());
                    for &i in indices {
                        d.data_mut()[i] += g.item() * (xv.data()[i] - lse).exp();
                    }
                    acc(*x, d);
                }
            }
        }
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shapes")
}

pub(crate) fn softmax_row<S: Scalar>(row: &mut [S], keep: Option<&[bool]>) {
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| kept(*j))
        .map(|(_, &v)| v)
        .fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for (j, v) in row.iter_mut().enumerate() {
        *v = if kept(j) { (*v - max).exp() } else { S::zero() };
        total += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    softmax_row(row, None);
}

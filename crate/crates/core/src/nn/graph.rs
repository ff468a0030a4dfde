//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation; nodes are
//! appended after their inputs, so reverse insertion order is a valid
//! topological order for the backward sweep.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("unknown parameter id {0:?}")]
    UnknownParam(String),
    #[error("parameter {id:?} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        id: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub id: String,
    pub tensor: Tensor,
}

/// Ordered parameter collection; insertion order is the checkpoint manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate id.
    pub fn add(&mut self, id: impl Into<String>, tensor: Tensor) -> ParamId {
        let id = id.into();
        assert!(!self.index.contains_key(&id), "duplicate parameter id {id}");
        let pid = self.params.len();
        self.index.insert(id.clone(), pid);
        self.params.push(Param { id, tensor });
        ParamId(pid)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, pid: ParamId) -> &Tensor {
        &self.params[pid.0].tensor
    }

    pub fn get_mut(&mut self, pid: ParamId) -> &mut Tensor {
        &mut self.params[pid.0].tensor
    }

    pub fn id_of(&self, pid: ParamId) -> &str {
        &self.params[pid.0].id
    }

    pub fn lookup(&self, id: &str) -> Option<ParamId> {
        self.index.get(id).copied().map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn iter_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.params
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.id.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Overwrites the value of an existing parameter, checking its shape.
    pub fn assign(&mut self, id: &str, tensor: Tensor) -> Result<(), NnError> {
        let pid = self.lookup(id).ok_or_else(|| NnError::UnknownParam(id.to_string()))?;
        let cur = &mut self.params[pid.0].tensor;
        if cur.shape() != tensor.shape() {
            return Err(NnError::ShapeMismatch {
                id: id.to_string(),
                got: tensor.shape(),
                expected: cur.shape(),
            });
        }
        *cur = tensor;
        Ok(())
    }
}

/// Gradient accumulator, one optional slot per parameter.
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn clear(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
    }

    pub fn get(&self, pid: ParamId) -> Option<&Tensor> {
        self.slots[pid.0].as_ref()
    }

    fn accumulate(&mut self, pid: usize, g: &Tensor) {
        match &mut self.slots[pid] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.slots.iter_mut().flatten() {
            t.data.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var),
    Reshape(Var),
    SumAll(Var),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    GroupMax(Var, Vec<usize>),
    Square(Var),
    SmoothL1(Var),
    LayerNorm(Var, Vec<f64>),
    ClampMin(Var, f64),
    Custom(Var, Tensor),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(pid) => &self.store.params[pid].tensor,
            _ => node.value.as_ref().expect("non-param node holds a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn param(&mut self, pid: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&pid.0) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(pid.0),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(pid.0, v);
        v
    }

    /// Same value, no gradient flows back through the result.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul(self.value(b));
        self.push(t, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul_t(self.value(b));
        self.push(t, Op::MatMulT(a, b))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!((1, ta.cols), tr.shape(), "add_row shape mismatch");
        let mut t = ta.clone();
        for r in 0..t.rows {
            for (x, b) in t.data[r * t.cols..(r + 1) * t.cols].iter_mut().zip(&tr.data) {
                *x += b;
            }
        }
        self.push(t, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a 1×c row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!((1, ta.cols), tr.shape(), "mul_row shape mismatch");
        let mut t = ta.clone();
        for r in 0..t.rows {
            for (x, b) in t.data[r * t.cols..(r + 1) * t.cols].iter_mut().zip(&tr.data) {
                *x *= b;
            }
        }
        self.push(t, Op::MulRow(a, row))
    }

    /// Multiplies row r of `a` by entry r of an r×1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (self.value(a), self.value(col));
        assert_eq!((ta.rows, 1), tc.shape(), "mul_col shape mismatch");
        let mut t = ta.clone();
        for r in 0..t.rows {
            let k = tc.data[r];
            t.data[r * t.cols..(r + 1) * t.cols].iter_mut().for_each(|x| *x *= k);
        }
        self.push(t, Op::MulCol(a, col))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let t = self.value(a).map(|x| x + k);
        self.push(t, Op::AddScalar(a, s))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let t = self.value(a).map(|x| x * k);
        self.push(t, Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x * k);
        self.push(t, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x + k);
        self.push(t, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = softmax_rows(self.value(a));
        self.push(t, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut t = ta.clone();
        for r in 0..t.rows {
            let row = &mut t.data[r * t.cols..(r + 1) * t.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(t, Op::LogSoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut t = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                t.data[r * cols + off..r * cols + off + tp.cols].copy_from_slice(tp.row(r));
            }
            off += tp.cols;
        }
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&tp.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        assert!(start + len <= ta.cols, "slice_cols out of range");
        let mut t = Tensor::zeros(ta.rows, len);
        for r in 0..ta.rows {
            t.data[r * len..(r + 1) * len].copy_from_slice(&ta.row(r)[start..start + len]);
        }
        self.push(t, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        assert!(start + len <= ta.rows, "slice_rows out of range");
        let t = Tensor::from_vec(len, ta.cols, ta.data[start * ta.cols..(start + len) * ta.cols].to_vec());
        self.push(t, Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * ta.cols);
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        let t = Tensor::from_vec(idx.len(), ta.cols, data);
        self.push(t, Op::GatherRows(a, idx.to_vec()))
    }

    /// Tiles a 1×c row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rows, 1, "repeat_rows expects a row vector");
        let mut data = Vec::with_capacity(n * ta.cols);
        for _ in 0..n {
            data.extend_from_slice(&ta.data);
        }
        let t = Tensor::from_vec(n, ta.cols, data);
        self.push(t, Op::RepeatRows(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_vec(rows, cols, ta.data.clone());
        self.push(t, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: r×c → 1×c.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut t = Tensor::zeros(1, ta.cols);
        for r in 0..ta.rows {
            for (x, v) in t.data.iter_mut().zip(ta.row(r)) {
                *x += v;
            }
        }
        self.push(t, Op::SumRows(a))
    }

    /// Column-wise max over rows: r×c → 1×c. Ties route to the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert!(ta.rows > 0, "max_rows on empty tensor");
        let mut t = Tensor::filled(1, ta.cols, f64::NEG_INFINITY);
        let mut arg = vec![0; ta.cols];
        for r in 0..ta.rows {
            for (c, &v) in ta.row(r).iter().enumerate() {
                if v > t.data[c] {
                    t.data[c] = v;
                    arg[c] = r;
                }
            }
        }
        self.push(t, Op::MaxRows(a, arg))
    }

    /// Max over consecutive row groups of the given sizes: r×c → groups×c.
    pub fn group_max_rows(&mut self, a: Var, sizes: &[usize]) -> Var {
        let ta = self.value(a);
        assert_eq!(sizes.iter().sum::<usize>(), ta.rows, "group sizes must cover all rows");
        let cols = ta.cols;
        let mut t = Tensor::filled(sizes.len(), cols, f64::NEG_INFINITY);
        let mut arg = vec![0; sizes.len() * cols];
        let mut start = 0;
        for (gi, &n) in sizes.iter().enumerate() {
            assert!(n > 0, "empty group in group_max_rows");
            for r in start..start + n {
                for (c, &v) in ta.row(r).iter().enumerate() {
                    let k = gi * cols + c;
                    if v > t.data[k] {
                        t.data[k] = v;
                        arg[k] = r;
                    }
                }
            }
            start += n;
        }
        self.push(t, Op::GroupMax(a, arg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a))
    }

    /// Elementwise Huber loss with β = 1.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| {
            if x.abs() < 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        });
        self.push(t, Op::SmoothL1(a))
    }

    /// Per-row normalisation to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let ta = self.value(a);
        let mut t = ta.clone();
        let mut rstds = Vec::with_capacity(ta.rows);
        for r in 0..ta.rows {
            let row = &mut t.data[r * ta.cols..(r + 1) * ta.cols];
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let rstd = 1.0 / (var + EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mu) * rstd);
            rstds.push(rstd);
        }
        self.push(t, Op::LayerNorm(a, rstds))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let t = self.value(a).map(|x| x.max(lo));
        self.push(t, Op::ClampMin(a, lo))
    }

    /// Scalar node whose value and gradient w.r.t. `input` are computed
    /// outside the tape (e.g. analytic geometric penalties).
    pub fn custom_scalar(&mut self, input: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(self.value(input).shape(), grad.shape(), "custom gradient shape mismatch");
        self.push(Tensor::scalar(value), Op::Custom(input, grad))
    }

    pub fn cross_entropy(&mut self, logits_row: Var, target: usize) -> Var {
        let cols = self.value(logits_row).cols;
        let ls = self.log_softmax_rows(logits_row);
        let mut onehot = Tensor::zeros(1, cols);
        onehot.data[target] = -1.0;
        let oh = self.constant(onehot);
        let picked = self.mul(ls, oh);
        self.sum(picked)
    }

    /// Top-2 gaps per column for every `max_rows` node; small gaps mark
    /// points where the pooled gradient switches rows.
    pub fn max_rows_gaps(&self) -> Vec<f64> {
        let mut gaps = Vec::new();
        for node in &self.nodes {
            if let Op::MaxRows(a, _) = node.op {
                let t = self.value(a);
                for c in 0..t.cols {
                    let mut col: Vec<f64> = (0..t.rows).map(|r| t.get(r, c)).collect();
                    col.sort_by(|x, y| y.total_cmp(x));
                    if col.len() > 1 {
                        gaps.push(col[0] - col[1]);
                    }
                }
            }
        }
        gaps
    }

    /// Back-propagates from a scalar `loss`, accumulating parameter gradients.
    pub fn backward(&self, loss: Var, grads: &mut Grads) -> Result<(), NnError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NnError::NonScalarLoss(lv.shape()));
        }
        if !lv.data[0].is_finite() {
            return Err(NnError::NonFiniteLoss(lv.data[0]));
        }
        let mut g: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = g[idx].take() else { continue };
            self.backward_node(idx, &gout, &mut g, grads);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, gout: &Tensor, g: &mut [Option<Tensor>], grads: &mut Grads) {
        let out = self.nodes[idx].value.as_ref();
        match &self.nodes[idx].op {
            Op::Const => {}
            Op::Param(pid) => grads.accumulate(*pid, gout),
            Op::MatMul(a, b) => {
                let ga = gout.matmul_t(self.value(*b));
                let gb = self.value(*a).t_matmul(gout);
                acc(g, *a, ga);
                acc(g, *b, gb);
            }
            Op::MatMulT(a, b) => {
                let ga = gout.matmul(self.value(*b));
                let gb = gout.t_matmul(self.value(*a));
                acc(g, *a, ga);
                acc(g, *b, gb);
            }
            Op::Add(a, b) => {
                acc(g, *a, gout.clone());
                acc(g, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                acc(g, *a, gout.clone());
                acc(g, *b, gout.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(g, *a, zip_with(gout, tb, |x, y| x * y));
                acc(g, *b, zip_with(gout, ta, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(g, *a, gout.clone());
                acc(g, *row, col_sums(gout));
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let mut ga = gout.clone();
                let mut gr = Tensor::zeros(1, ta.cols);
                for r in 0..ta.rows {
                    for c in 0..ta.cols {
                        let k = r * ta.cols + c;
                        ga.data[k] = gout.data[k] * tr.data[c];
                        gr.data[c] += gout.data[k] * ta.data[k];
                    }
                }
                acc(g, *a, ga);
                acc(g, *row, gr);
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let mut ga = gout.clone();
                let mut gc = Tensor::zeros(ta.rows, 1);
                for r in 0..ta.rows {
                    for c in 0..ta.cols {
                        let k = r * ta.cols + c;
                        ga.data[k] = gout.data[k] * tc.data[r];
                        gc.data[r] += gout.data[k] * ta.data[k];
                    }
                }
                acc(g, *a, ga);
                acc(g, *col, gc);
            }
            Op::AddScalar(a, s) => {
                acc(g, *a, gout.clone());
                acc(g, *s, Tensor::scalar(gout.sum()));
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                let ta = self.value(*a);
                acc(g, *a, gout.map(|x| x * k));
                let gs: f64 = gout.data.iter().zip(&ta.data).map(|(x, y)| x * y).sum();
                acc(g, *s, Tensor::scalar(gs));
            }
            Op::Scale(a, k) => acc(g, *a, gout.map(|x| x * k)),
            Op::AddConst(a) => acc(g, *a, gout.clone()),
            Op::Relu(a) => {
                let ta = self.value(*a);
                acc(g, *a, zip_with(gout, ta, |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                let y = out.unwrap();
                acc(g, *a, zip_with(gout, y, |x, s| x * s * (1.0 - s)));
            }
            Op::Tanh(a) => {
                let y = out.unwrap();
                acc(g, *a, zip_with(gout, y, |x, t| x * (1.0 - t * t)));
            }
            Op::Exp(a) => {
                let y = out.unwrap();
                acc(g, *a, zip_with(gout, y, |x, e| x * e));
            }
            Op::SoftmaxRows(a) => {
                let y = out.unwrap();
                let mut ga = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), gout.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..y.cols {
                        ga.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(g, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = out.unwrap();
                let mut ga = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let gsum: f64 = gout.row(r).iter().sum();
                    for c in 0..y.cols {
                        let k = r * y.cols + c;
                        ga.data[k] = gout.data[k] - y.data[k].exp() * gsum;
                    }
                }
                acc(g, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    let mut gp = Tensor::zeros(gout.rows, cols);
                    for r in 0..gout.rows {
                        gp.data[r * cols..(r + 1) * cols]
                            .copy_from_slice(&gout.row(r)[off..off + cols]);
                    }
                    off += cols;
                    acc(g, p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let (rows, cols) = self.value(p).shape();
                    acc(g, p, Tensor::from_vec(rows, cols, gout.data[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..ta.rows {
                    ga.data[r * ta.cols + start..r * ta.cols + start + gout.cols]
                        .copy_from_slice(gout.row(r));
                }
                acc(g, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                ga.data[start * ta.cols..start * ta.cols + gout.len()].copy_from_slice(&gout.data);
                acc(g, *a, ga);
            }
            Op::GatherRows(a, idx_list) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                for (k, &i) in idx_list.iter().enumerate() {
                    for (x, v) in ga.data[i * ta.cols..(i + 1) * ta.cols].iter_mut().zip(gout.row(k)) {
                        *x += v;
                    }
                }
                acc(g, *a, ga);
            }
            Op::RepeatRows(a) => acc(g, *a, col_sums(gout)),
            Op::Reshape(a) => {
                let (rows, cols) = self.value(*a).shape();
                acc(g, *a, Tensor::from_vec(rows, cols, gout.data.clone()));
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.value(*a).shape();
                acc(g, *a, Tensor::filled(rows, cols, gout.item()));
            }
            Op::SumRows(a) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    ga.data[r * cols..(r + 1) * cols].copy_from_slice(&gout.data);
                }
                acc(g, *a, ga);
            }
            Op::MaxRows(a, arg) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Tensor::zeros(rows, cols);
                for (c, &r) in arg.iter().enumerate() {
                    ga.data[r * cols + c] = gout.data[c];
                }
                acc(g, *a, ga);
            }
            Op::GroupMax(a, arg) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Tensor::zeros(rows, cols);
                for (k, &r) in arg.iter().enumerate() {
                    ga.data[r * cols + k % cols] += gout.data[k];
                }
                acc(g, *a, ga);
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                acc(g, *a, zip_with(gout, ta, |x, y| 2.0 * x * y));
            }
            Op::SmoothL1(a) => {
                let ta = self.value(*a);
                acc(g, *a, zip_with(gout, ta, |x, y| if y.abs() < 1.0 { x * y } else { x * y.signum() }));
            }
            Op::LayerNorm(a, rstds) => {
                let y = out.unwrap();
                let cols = y.cols;
                let n = cols as f64;
                let mut ga = Tensor::zeros(y.rows, cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), gout.row(r));
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for c in 0..cols {
                        ga.data[r * cols + c] = rstds[r] * (gr[c] - gmean - yr[c] * gy);
                    }
                }
                acc(g, *a, ga);
            }
            Op::ClampMin(a, lo) => {
                let ta = self.value(*a);
                acc(g, *a, zip_with(gout, ta, |x, y| if y > *lo { x } else { 0.0 }));
            }
            Op::Custom(a, grad) => {
                let k = gout.item();
                acc(g, *a, grad.map(|x| x * k));
            }
        }
    }
}

fn acc(g: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut g[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect())
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut s = Tensor::zeros(1, t.cols);
    for r in 0..t.rows {
        for (x, v) in s.data.iter_mut().zip(t.row(r)) {
            *x += v;
        }
    }
    s
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows {
        let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    softmax_rows(&Tensor::row_vector(xs.to_vec())).data
}

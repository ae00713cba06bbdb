//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already a topological order and [`Graph::backward`] simply
//! walks it in reverse. Graphs are cheap to build and are rebuilt for every
//! forward pass.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// Per-query-row list of key rows an attention query may look at.
pub type AttendList = Arc<Vec<Vec<u32>>>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    Reshape(Var),
    Sum(Var),
    GroupWeightedSum {
        weights: Var,
        items: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        allow: AttendList,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    tracked: bool,
}

/// A computation graph. Single-threaded; may be moved between threads.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction, outside any graph.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(i);
        if m == f64::NEG_INFINITY {
            continue;
        }
        let mut s = 0.0;
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = libm::exp(v - m);
            s += *dst;
        }
        for dst in o.iter_mut() {
            *dst /= s;
        }
    }
    out
}

/// Row-wise log-softmax, outside any graph. `-inf` entries stay `-inf`.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + libm::log(row.iter().map(|&v| libm::exp(v - m)).sum::<f64>());
        for (dst, &v) in out.row_mut(i).iter_mut().zip(row) {
            *dst = v - lse;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, parents: &[Var]) -> Var {
        let tracked = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => parents.iter().any(|p| self.nodes[p.0].tracked),
        };
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, &[])
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, &[])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, or zeros when nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node, laid
    /// out per query row, then per head, then per allowed key.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Sub(a, b), value, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = map(self.value(a), |v| v * c);
        self.push(Op::Scale(a, c), value, &[a])
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (m, n) = tx.dims2();
        if tr.dims2() != (1, n) {
            return Err(dim_err("add_row", tx.shape(), tr.shape()));
        }
        let mut value = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for ((o, &a), &b) in value.row_mut(i).iter_mut().zip(tx.row(i)).zip(tr.data()) {
                *o = a + b;
            }
        }
        Ok(self.push(Op::AddRow(x, row), value, &[x, row]))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = map(self.value(x), |v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), value, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = map(self.value(x), sigmoid);
        self.push(Op::Sigmoid(x), value, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = map(self.value(x), libm::tanh);
        self.push(Op::Tanh(x), value, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.push(Op::SoftmaxRows(x), value, &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let value = log_softmax_rows(self.value(x));
        self.push(Op::LogSoftmaxRows(x), value, &[x])
    }

    /// Row-wise layer normalisation with learned `1×n` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        for p in [gamma, beta] {
            if self.value(p).dims2() != (1, n) {
                return Err(dim_err("layer_norm", tx.shape(), self.value(p).shape()));
            }
        }
        let mut normed = Tensor::zeros(&[m, n]);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / libm::sqrt(var + LN_EPS);
            for (o, &v) in normed.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut value = normed.clone();
        for i in 0..m {
            for (j, o) in value.row_mut(i).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            value,
            &[x, gamma, beta],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let m = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != m {
                return Err(dim_err("concat_cols", self.value(*first).shape(), t.shape()));
            }
            total += t.cols();
        }
        let mut value = Tensor::zeros(&[m, total]);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            let c = t.cols();
            for i in 0..m {
                value.row_mut(i)[off..off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != n {
                return Err(dim_err("concat_rows", self.value(*first).shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, parts))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2();
        if len == 0 || start + len > n {
            return Err(dim_err("slice_cols", t.shape(), &[start, len]));
        }
        let mut value = Tensor::zeros(&[m, len]);
        for i in 0..m {
            value.row_mut(i).copy_from_slice(&t.row(i)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols(x, start), value, &[x]))
    }

    /// Selects rows by index (embedding lookup); indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2();
        if indices.is_empty() {
            return Err(Error::Contract("gather of no rows".into()));
        }
        let mut value = Tensor::zeros(&[indices.len(), n]);
        for (o, &i) in indices.iter().enumerate() {
            if i >= m {
                return Err(dim_err("gather_rows", t.shape(), &[i]));
            }
            value.row_mut(o).copy_from_slice(t.row(i));
        }
        Ok(self.push(Op::GatherRows(x, indices), value, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), value, &[x]))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `out[i] = Σ_l weights[i, l] · items[i·L + l]` for `weights: n×L` and
    /// `items: (n·L)×w`.
    pub fn group_weighted_sum(&mut self, weights: Var, items: Var) -> Result<Var> {
        let (tw, ti) = (self.value(weights), self.value(items));
        let (n, l) = tw.dims2();
        let (ni, w) = ti.dims2();
        if ni != n * l {
            return Err(dim_err("group_weighted_sum", tw.shape(), ti.shape()));
        }
        let mut value = Tensor::zeros(&[n, w]);
        for i in 0..n {
            for j in 0..l {
                let a = tw.get(i, j);
                let item = ti.row(i * l + j);
                for (o, &x) in value.row_mut(i).iter_mut().zip(item) {
                    *o += a * x;
                }
            }
        }
        Ok(self.push(Op::GroupWeightedSum { weights, items }, value, &[weights, items]))
    }

    /// Multi-head scaled dot-product attention restricted to an explicit
    /// per-row list of visible keys. `q: n_q×d`, `k, v: n_k×d`; each head
    /// uses a contiguous `d/heads` column block. Rows with no visible key
    /// produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        allow: AttendList,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = tq.dims2();
        let (nk, dk) = tk.dims2();
        if dk != d || tv.dims2() != (nk, d) {
            return Err(dim_err("attention", tq.shape(), tk.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(alloc::format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        if allow.len() != nq {
            return Err(dim_err("attention", tq.shape(), &[allow.len()]));
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut value = Tensor::zeros(&[nq, d]);
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for (i, keys) in allow.iter().enumerate() {
            for h in 0..heads {
                let qi = &tq.row(i)[h * dh..(h + 1) * dh];
                scores.clear();
                for &j in keys {
                    let kj = &tk.row(j as usize)[h * dh..(h + 1) * dh];
                    let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    scores.push(s * scale);
                }
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = libm::exp(*s - m);
                    z += *s;
                }
                let out = &mut value.row_mut(i)[h * dh..(h + 1) * dh];
                for (&j, s) in keys.iter().zip(scores.iter()) {
                    let p = s / z;
                    probs.push(p);
                    let vj = &tv.row(j as usize)[h * dh..(h + 1) * dh];
                    for (o, &x) in out.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                allow,
                probs,
            },
            value,
            &[q, k, v],
        ))
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.tracked {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn accumulate_ref(&mut self, v: Var, delta: &Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.tracked {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Back-propagates from a scalar node into every tracked ancestor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::filled(self.value(loss).shape(), 1.0);
        self.accumulate(loss, seed);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            if self.nodes[idx].tracked {
                self.propagate(idx, &g)?;
            }
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        let op = core::mem::replace(&mut self.nodes[idx].op, Op::Constant);
        let result = self.propagate_op(idx, &op, g);
        self.nodes[idx].op = op;
        result
    }

    fn propagate_op(&mut self, idx: usize, op: &Op, g: &Tensor) -> Result<()> {
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = self.value(b).cols();
                if self.nodes[a.0].tracked {
                    let mut da = Tensor::zeros(self.value(a).shape());
                    // dA = G · Bᵀ
                    gemm(m, n, k, g.data(), (n, 1), self.value(b).data(), (1, n), da.data_mut(), false);
                    self.accumulate(a, da);
                }
                if self.nodes[b.0].tracked {
                    let mut db = Tensor::zeros(self.value(b).shape());
                    // dB = Aᵀ · G
                    gemm(k, m, n, self.value(a).data(), (1, k), g.data(), (n, 1), db.data_mut(), false);
                    self.accumulate(b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate_ref(a, g);
                self.accumulate_ref(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate_ref(a, g);
                self.accumulate(b, map(g, |v| -v));
            }
            Op::Mul(a, b) => {
                let da = zip(g, self.value(b), |x, y| x * y);
                let db = zip(g, self.value(a), |x, y| x * y);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Scale(a, c) => self.accumulate(a, map(g, |v| v * c)),
            Op::AddRow(x, row) => {
                self.accumulate_ref(x, g);
                let (m, n) = g.dims2();
                let mut dr = Tensor::zeros(&[1, n]);
                for i in 0..m {
                    for (o, &v) in dr.data_mut().iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.accumulate(row, dr);
            }
            Op::Relu(x) => {
                let dx = zip(g, self.value(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = zip(g, &self.nodes[idx].value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(x, dx);
            }
            Op::Tanh(x) => {
                let dx = zip(g, &self.nodes[idx].value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[idx].value;
                let (m, n) = y.dims2();
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in dx.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &self.nodes[idx].value;
                let (m, n) = y.dims2();
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let total: f64 = g.row(i).iter().sum();
                    for ((o, &gv), &yv) in dx.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = gv - libm::exp(yv) * total;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref normed,
                ref inv_std,
            } => {
                let (m, n) = normed.dims2();
                let gam = self.value(gamma).data().to_vec();
                let mut dx = Tensor::zeros(&[m, n]);
                let mut dg = Tensor::zeros(&[1, n]);
                let mut db = Tensor::zeros(&[1, n]);
                let mut dxhat = vec![0.0; n];
                for i in 0..m {
                    let (gr, xr) = (g.row(i), normed.row(i));
                    for j in 0..n {
                        dxhat[j] = gr[j] * gam[j];
                        dg.data_mut()[j] += gr[j] * xr[j];
                        db.data_mut()[j] += gr[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = inv_std[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(gamma, dg);
                self.accumulate(beta, db);
            }
            Op::ConcatCols(ref parts) => {
                let m = g.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut dp = Tensor::zeros(self.value(p).shape());
                    for i in 0..m {
                        dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                    }
                    off += c;
                    self.accumulate(p, dp);
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let dp = Tensor::new(self.value(p).shape().to_vec(), g.data()[off..off + len].to_vec())?;
                    off += len;
                    self.accumulate(p, dp);
                }
            }
            Op::SliceCols(x, start) => {
                let mut dx = Tensor::zeros(self.value(x).shape());
                let len = g.cols();
                for i in 0..g.rows() {
                    dx.row_mut(i)[start..start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(x, dx);
            }
            Op::GatherRows(x, ref indices) => {
                let mut dx = Tensor::zeros(self.value(x).shape());
                for (o, &i) in indices.iter().enumerate() {
                    for (d, &v) in dx.row_mut(i).iter_mut().zip(g.row(o)) {
                        *d += v;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Reshape(x) => {
                let dx = g.reshaped(self.value(x).shape())?;
                self.accumulate(x, dx);
            }
            Op::Sum(x) => {
                let dx = Tensor::filled(self.value(x).shape(), g.data()[0]);
                self.accumulate(x, dx);
            }
            Op::GroupWeightedSum { weights, items } => {
                let (n, l) = self.value(weights).dims2();
                let mut dw = Tensor::zeros(&[n, l]);
                let mut di = Tensor::zeros(self.value(items).shape());
                for i in 0..n {
                    for j in 0..l {
                        let item = self.value(items).row(i * l + j);
                        let dot: f64 = item.iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                        dw.set(i, j, dot);
                        let a = self.value(weights).get(i, j);
                        for (o, &gv) in di.row_mut(i * l + j).iter_mut().zip(g.row(i)) {
                            *o = a * gv;
                        }
                    }
                }
                self.accumulate(weights, dw);
                self.accumulate(items, di);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                ref allow,
                ref probs,
            } => {
                let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
                let d = tq.cols();
                let dh = d / heads;
                let scale = 1.0 / libm::sqrt(dh as f64);
                let mut dq = Tensor::zeros(tq.shape());
                let mut dk = Tensor::zeros(tk.shape());
                let mut dv = Tensor::zeros(tv.shape());
                let mut cursor = 0;
                let mut dp = Vec::new();
                for (i, keys) in allow.iter().enumerate() {
                    for h in 0..heads {
                        let span = h * dh..(h + 1) * dh;
                        let gi = &g.row(i)[span.clone()];
                        let p = &probs[cursor..cursor + keys.len()];
                        cursor += keys.len();
                        dp.clear();
                        for (&j, &pj) in keys.iter().zip(p) {
                            let vj = &tv.row(j as usize)[span.clone()];
                            dp.push(gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                            for (o, &gv) in dv.row_mut(j as usize)[span.clone()].iter_mut().zip(gi) {
                                *o += pj * gv;
                            }
                        }
                        let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        let qi = tq.row(i)[span.clone()].to_vec();
                        for ((&j, &pj), &dpj) in keys.iter().zip(p).zip(&dp) {
                            let ds = pj * (dpj - inner) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &tk.row(j as usize)[span.clone()];
                            for (o, &kv) in dq.row_mut(i)[span.clone()].iter_mut().zip(kj) {
                                *o += ds * kv;
                            }
                            for (o, &qv) in dk.row_mut(j as usize)[span.clone()].iter_mut().zip(&qi) {
                                *o += ds * qv;
                            }
                        }
                    }
                }
                self.accumulate(q, dq);
                self.accumulate(k, dk);
                self.accumulate(v, dv);
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::row_vector(&[0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::row_vector(&[libm::log(2.0), 0.0]));
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 4], 2.0, &mut rng);
        let s = softmax_rows(&x);
        for i in 0..3 {
            let z: f64 = x.row(i).iter().map(|v| libm::exp(*v)).sum();
            for j in 0..4 {
                assert!((s.get(i, j) - libm::exp(x.get(i, j)) / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(&[-1.0, 2.0, 0.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[2], 0.5);
        let t = g.constant(Tensor::scalar(1.2));
        let t = g.tanh(t);
        assert!((g.value(t).data()[0] - 0.83365).abs() < 1e-5);
    }

    #[test]
    fn tanh_matches_exponential_definition() {
        // tanh(x) = (e^{2x} - 1)/(e^{2x} + 1) with e^{2x} from its Taylor series.
        let x: f64 = 1.2;
        let mut term = 1.0;
        let mut e2x = 1.0;
        for n in 1..60 {
            term *= 2.0 * x / n as f64;
            e2x += term;
        }
        let reference = (e2x - 1.0) / (e2x + 1.0);
        assert!((libm::tanh(x) - reference).abs() < 1e-12);
        assert!((reference - 0.83365).abs() < 1e-5);
    }

    #[test]
    fn sum_gradient_is_ones_and_constants_get_none() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(&[1.0, -2.0, 3.0]));
        let c = g.constant(Tensor::row_vector(&[4.0, 5.0, 6.0]));
        let y = g.add(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.grad(c).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_matmul_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::uniform(&[3, 3], 1.0, &mut rng);
        let x = Tensor::uniform(&[3, 1], 1.0, &mut rng);
        let err = fd_check(
            |g, wv| {
                let xv = g.constant(x.clone());
                let p = g.matmul(wv, xv)?;
                let r = g.relu(p);
                Ok(g.sum(r))
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let q = g.constant(Tensor::uniform(&[3, 4], 1.0, &mut rng));
        let k = g.constant(Tensor::uniform(&[5, 4], 1.0, &mut rng));
        let common = [0.3, -0.2, 0.9, 1.5];
        let v = g.constant(Tensor::from_rows(&[&common[..]; 5]));
        let allow: AttendList = Arc::new(vec![vec![0], vec![0, 1, 2], vec![1, 2, 3, 4]]);
        let out = g.attention(q, k, v, 2, allow.clone()).unwrap();
        for i in 0..3 {
            for (a, b) in g.value(out).row(i).iter().zip(common) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let probs = g.attention_probs(out).unwrap();
        let mut cursor = 0;
        for keys in allow.iter() {
            for _ in 0..2 {
                let s: f64 = probs[cursor..cursor + keys.len()].iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                cursor += keys.len();
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::uniform(&[4, 4], 1.0, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let wv = g.leaf(w.clone());
            let s = g.softmax_rows(wv);
            let t = g.tanh(s);
            let l = g.sum(t);
            g.backward(l).unwrap();
            g.grad(wv)
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

//! Wengert tape: define-by-run reverse-mode differentiation.
//!
//! Operations append nodes in creation order; [`Tape::backward`] walks them
//! in strict reverse order, accumulating each node's gradient additively
//! from all of its consumers. The tape also counts multiply-accumulate
//! operations for every matmul-family node (`a·b·c` per `(a×b)(b×c)`
//! product), which the cost profiler reads through [`Tape::madds`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Parameter, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a @ b`; `a` may be rank-1 (treated as a single row).
    Matmul(Var, Var),
    /// `a @ b^T` with `b` stored row-major `[n, k]`.
    MatmulTb(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Rank-2 plus rank-1 broadcast over rows.
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanPoolRows(Var),
    SliceRows(Var, usize),
    Row(Var, usize),
    Sum(Var),
    MeanAll(Var),
    Dot(Var, Var),
    StackScalars(Vec<Var>),
    LogSumExp(Var),
    Embed {
        table: Var,
        ids: Vec<u32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Parameter name when this leaf was bound from a [`ParamSet`].
    name: Option<String>,
    trainable: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or `None` if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    madds: u64,
}

// ---------------------------------------------------------------------------
// raw kernels (shared by forward and backward)

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out = a @ b^T` where `b` is `[n, k]` row-major.
fn matmul_tb_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a^T @ g` where `a` is `[m, k]` and `g` is `[m, n]`.
fn matmul_ta_into(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn softmax_rows_into(x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let os = &mut out[r * cols..(r + 1) * cols];
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (o, &v) in os.iter_mut().zip(xs) {
            let e = (v - max).exp();
            *o = e;
            denom += e;
        }
        for o in os.iter_mut() {
            *o /= denom;
        }
    }
}

// ---------------------------------------------------------------------------

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of every matmul-family op recorded so far.
    pub fn madds(&self) -> u64 {
        self.madds
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            name: None,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a constant input (no name, never in the gradient map).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Register a named parameter leaf; its gradient appears in
    /// [`Tape::backward_params`] output under the parameter name.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            name: Some(p.name.clone()),
            trainable: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    // -- linear algebra ----------------------------------------------------

    /// Matrix product. `a` is `[m, k]` or rank-1 `[k]` (single row, in which
    /// case the result is rank-1 `[n]`); `b` must be `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() != 2 || ta.rank() == 0 || ta.rank() > 2 || ta.cols() != tb.shape()[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
        let rank1 = ta.rank() == 1;
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        self.madds += (m * k * n) as u64;
        let shape = if rank1 { vec![n] } else { vec![m, n] };
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Matmul(a, b)))
    }

    /// `a @ b^T` for `a: [m, k]`, `b: [n, k]` -> `[m, n]`.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(self.shape_err("matmul_tb", a, b));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        matmul_tb_into(ta.data(), tb.data(), &mut out, m, k, n);
        self.madds += (m * k * n) as u64;
        Ok(self.push(Tensor::from_vec(vec![m, n], out)?, Op::MatmulTb(a, b)))
    }

    // -- elementwise family -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("sub", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Sub(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Mul(a, b)))
    }

    /// Broadcast-add a rank-1 bias over the rows of a rank-2 tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.rank() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let cols = tx.shape()[1];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % cols])
            .collect();
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Scale(x, c)))
    }

    /// ReLU with the subgradient convention `relu'(0) = 0`.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Relu(x)))
    }

    // -- normalizations ------------------------------------------------------

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 && tx.rank() != 1 {
            return Err(self.shape_err("softmax_rows", x, x));
        }
        if tx.has_nan() {
            return Err(Error::Numeric("softmax_rows: NaN input".into()));
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; rows * cols];
        softmax_rows_into(tx.data(), &mut out, rows, cols);
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::SoftmaxRows(x)))
    }

    /// Layer normalization over the last axis, then affine by gamma/beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tx.rank() == 0 || tx.rank() > 2 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let xs = &tx.data()[r * d..(r + 1) * d];
            let os = &mut out[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for ((o, &v), (&g, &b)) in os
                .iter_mut()
                .zip(xs)
                .zip(tg.data().iter().zip(tb.data()))
            {
                *o = (v - mean) * inv_std * g + b;
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(
            Tensor::from_vec(shape, out)?,
            Op::LayerNorm { x, gamma, beta, eps },
        ))
    }

    // -- shape surgery -------------------------------------------------------

    /// Concatenate along the last (feature) axis. All parts must share the
    /// leading dimension; rank-1 parts concatenate into a longer rank-1.
    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat_last_dim: empty part list".into()));
        }
        let rank = self.value(parts[0]).rank();
        let rows = self.value(parts[0]).rows();
        let mut total_cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != rank || t.rows() != rows {
                return Err(self.shape_err("concat_last_dim", parts[0], p));
            }
            total_cols += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let shape = if rank == 1 {
            vec![total_cols]
        } else {
            vec![rows, total_cols]
        };
        Ok(self.push(
            Tensor::from_vec(shape, out)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Concatenate rank-2 tensors along the sequence (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat_rows: empty part list".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != cols {
                return Err(self.shape_err("concat_rows", parts[0], p));
            }
            rows += t.shape()[0];
            out.extend_from_slice(t.data());
        }
        Ok(self.push(
            Tensor::from_vec(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Average over the sequence (row) axis: `[T, d] -> [d]`.
    pub fn mean_pool_time(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.shape()[0] == 0 {
            return Err(self.shape_err("mean_pool_time", x, x));
        }
        let (t, d) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; d];
        for r in 0..t {
            for (o, &v) in out.iter_mut().zip(&tx.data()[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= t as f64;
        }
        Ok(self.push(Tensor::from_vec(vec![d], out)?, Op::MeanPoolRows(x)))
    }

    /// Take token rows `[0, k)` of a rank-2 tensor.
    pub fn slice_tokens(&mut self, x: Var, k: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(self.shape_err("slice_tokens", x, x));
        }
        let (t, d) = (tx.shape()[0], tx.shape()[1]);
        if k == 0 || k > t {
            return Err(Error::Config(format!(
                "slice_tokens: k = {k} out of range for sequence length {t}"
            )));
        }
        let out = tx.data()[..k * d].to_vec();
        Ok(self.push(Tensor::from_vec(vec![k, d], out)?, Op::SliceRows(x, k)))
    }

    /// Extract row `idx` of a rank-2 tensor as rank-1.
    pub fn row(&mut self, x: Var, idx: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || idx >= tx.shape()[0] {
            return Err(self.shape_err("row", x, x));
        }
        let d = tx.shape()[1];
        let out = tx.data()[idx * d..(idx + 1) * d].to_vec();
        Ok(self.push(Tensor::from_vec(vec![d], out)?, Op::Row(x, idx)))
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Config("mean_all: empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(x)))
    }

    /// Dot product of two rank-1 tensors -> scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || ta.shape() != tb.shape() {
            return Err(self.shape_err("dot", a, b));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        self.madds += ta.numel() as u64;
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    /// Pack scalar vars into a rank-1 vector.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.numel() != 1 {
                return Err(self.shape_err("stack_scalars", p, p));
            }
            out.push(t.item());
        }
        let n = out.len();
        Ok(self.push(
            Tensor::from_vec(vec![n], out)?,
            Op::StackScalars(parts.to_vec()),
        ))
    }

    /// `log(sum(exp(x)))` over a rank-1 tensor, max-shifted for stability.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 1 || tx.numel() == 0 {
            return Err(self.shape_err("logsumexp", x, x));
        }
        let max = tx.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = tx.data().iter().map(|v| (v - max).exp()).sum();
        Ok(self.push(Tensor::scalar(max + s.ln()), Op::LogSumExp(x)))
    }

    /// Embedding lookup: gather rows of `table` by token id.
    pub fn embed_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(self.shape_err("embed_lookup", table, table));
        }
        let (vocab, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Vocab { id, vocab });
            }
            let r = id as usize;
            out.extend_from_slice(&tt.data()[r * d..(r + 1) * d]);
        }
        let t = ids.len();
        Ok(self.push(
            Tensor::from_vec(vec![t, d], out)?,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. Returns per-var gradients; leaves
    /// that do not influence the loss have `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Numeric(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::from_vec(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape matches node value")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Backward pass returning gradients for every *named* parameter leaf on
    /// the tape. Parameters that do not influence the loss map to zeros.
    pub fn backward_params(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward(loss)?;
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                if !node.trainable {
                    continue;
                }
                let g = grads.grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => grads[v.0] = Some(contribution.to_vec()),
        }
    }

    fn accumulate_owned(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            None => grads[v.0] = Some(contribution),
        }
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                // dA = G @ B^T
                let mut da = vec![0.0; m * k];
                matmul_tb_into(g, tb.data(), &mut da, m, n, k);
                Self::accumulate_owned(grads, *a, da);
                // dB = A^T @ G
                let mut db = vec![0.0; k * n];
                matmul_ta_into(ta.data(), g, &mut db, m, k, n);
                Self::accumulate_owned(grads, *b, db);
            }
            Op::MatmulTb(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                // C = A @ B^T; dA = G @ B, dB = G^T @ A
                let mut da = vec![0.0; m * k];
                matmul_into(g, tb.data(), &mut da, m, n, k);
                Self::accumulate_owned(grads, *a, da);
                let mut db = vec![0.0; n * k];
                matmul_ta_into(g, ta.data(), &mut db, m, n, k);
                Self::accumulate_owned(grads, *b, db);
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g);
                Self::accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                Self::accumulate_owned(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                Self::accumulate_owned(grads, *a, da);
                Self::accumulate_owned(grads, *b, db);
            }
            Op::AddBias(x, bias) => {
                Self::accumulate(grads, *x, g);
                let cols = self.value(*bias).numel();
                let mut db = vec![0.0; cols];
                for (i, v) in g.iter().enumerate() {
                    db[i % cols] += v;
                }
                Self::accumulate_owned(grads, *bias, db);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(ys)
                        .zip(gs)
                    {
                        *d = yv * (gv - dot);
                    }
                }
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                let d = tx.cols();
                let rows = tx.rows();
                let mut dx = vec![0.0; rows * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let xs = &tx.data()[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let mean = xs.iter().sum::<f64>() / d as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    // x_hat and upstream-through-affine
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv_std).collect();
                    let dy: Vec<f64> = gs.iter().zip(tg.data()).map(|(gv, gm)| gv * gm).collect();
                    let mean_dy = dy.iter().sum::<f64>() / d as f64;
                    let mean_dy_xhat =
                        dy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (i, dxi) in dx[r * d..(r + 1) * d].iter_mut().enumerate() {
                        *dxi = (dy[i] - mean_dy - xhat[i] * mean_dy_xhat) * inv_std;
                    }
                    for i in 0..d {
                        dgamma[i] += gs[i] * xhat[i];
                        dbeta[i] += gs[i];
                    }
                }
                Self::accumulate_owned(grads, *x, dx);
                Self::accumulate_owned(grads, *gamma, dgamma);
                Self::accumulate_owned(grads, *beta, dbeta);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut dp = vec![0.0; rows * c];
                    for r in 0..rows {
                        dp[r * c..(r + 1) * c]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    Self::accumulate_owned(grads, p, dp);
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).shape()[0];
                    let dp = g[offset * cols..(offset + r) * cols].to_vec();
                    Self::accumulate_owned(grads, p, dp);
                    offset += r;
                }
            }
            Op::MeanPoolRows(x) => {
                let tx = self.value(*x);
                let (t, d) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![0.0; t * d];
                for r in 0..t {
                    for (o, gv) in dx[r * d..(r + 1) * d].iter_mut().zip(g) {
                        *o = gv / t as f64;
                    }
                }
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::SliceRows(x, k) => {
                let tx = self.value(*x);
                let (t, d) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![0.0; t * d];
                dx[..k * d].copy_from_slice(g);
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::Row(x, idx) => {
                let tx = self.value(*x);
                let (t, d) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![0.0; t * d];
                dx[idx * d..(idx + 1) * d].copy_from_slice(g);
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                Self::accumulate_owned(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                Self::accumulate_owned(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = tb.data().iter().map(|v| v * g[0]).collect();
                let db: Vec<f64> = ta.data().iter().map(|v| v * g[0]).collect();
                Self::accumulate_owned(grads, *a, da);
                Self::accumulate_owned(grads, *b, db);
            }
            Op::StackScalars(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    Self::accumulate(grads, p, &g[i..i + 1]);
                }
            }
            Op::LogSumExp(x) => {
                let tx = self.value(*x);
                let max = tx.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = tx.data().iter().map(|v| (v - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                let dx: Vec<f64> = exps.iter().map(|e| g[0] * e / denom).collect();
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::Embed { table, ids } => {
                let tt = self.value(*table);
                let d = tt.shape()[1];
                let mut dt = vec![0.0; tt.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    let r = id as usize;
                    for (o, gv) in dt[r * d..(r + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d])
                    {
                        *o += gv;
                    }
                }
                Self::accumulate_owned(grads, *table, dt);
            }
        }
    }
}

/// Bind every parameter in `set` onto the tape, keyed by name.
pub fn bind_params(tape: &mut Tape, set: &ParamSet) -> BTreeMap<String, Var> {
    let mut map = BTreeMap::new();
    for p in set.iter() {
        map.insert(p.name.clone(), tape.param(p));
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{assert_close, naive_matmul, naive_softmax_rows};

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::eye(2));
        let m = tape.leaf(t2(&[vec![3.0, -1.0], vec![7.0, 0.5]]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), tape.value(m));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.leaf(t2(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let out = tape.matmul(a, b).unwrap();
        let expect = naive_matmul(
            &[1.0, 2.0, 3.0, 4.0],
            &[5.0, 6.0, 7.0, 8.0],
            2,
            2,
            2,
        );
        assert_eq!(expect, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(tape.value(out).data(), expect.as_slice());
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[vec![1.5, -2.0], vec![0.25, 9.0]]));
        let z = tape.leaf(Tensor::zeros(&[2, 3]));
        let out = tape.matmul(a, z).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_and_saturated() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![0.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x2 = tape.leaf(t2(&[vec![1000.0, 0.0]]));
        let y2 = tape.softmax_rows(x2).unwrap();
        let d = tape.value(y2).data();
        assert!(d[0] > 1.0 - 1e-12 && d[1] < 1e-12 && d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_direct_evaluation() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0, 3.0]]));
        let y = tape.softmax_rows(x).unwrap();
        let expect = naive_softmax_rows(&[1.0, 2.0, 3.0], 1, 3);
        assert_close(tape.value(y).data(), &expect, 1e-15, "softmax");
        assert!((expect[0] - 0.09003057).abs() < 1e-8);
        assert!((expect[1] - 0.24472847).abs() < 1e-8);
        assert!((expect[2] - 0.66524096).abs() < 1e-8);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[
            vec![312.0, -1000.0, 4.5, 0.0],
            vec![-7.25, 3.125, 999.0, -999.0],
        ]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        for r in 0..2 {
            let s: f64 = v.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {r} sums to {s}");
        }
    }

    #[test]
    fn softmax_nan_input_is_numeric_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![f64::NAN, 0.0]]));
        assert!(matches!(
            tape.softmax_rows(x),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![3.7, 3.7, 3.7]]));
        let g = tape.leaf(Tensor::full(&[3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![1.0, -1.0]]));
        let g = tape.leaf(Tensor::full(&[2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        // mean 0, var 1 -> 1/sqrt(1 + 1e-5)
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        let got = tape.value(y).data();
        assert!((got[0] - want).abs() < 1e-12 && (got[1] + want).abs() < 1e-12);
        assert!((got[0] - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_shift_invariant() {
        let row = vec![0.4, -2.0, 1.3, 0.9];
        let shifted: Vec<f64> = row.iter().map(|v| v + 11.25).collect();
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::full(&[4], 1.0));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let x1 = tape.leaf(t2(&[row]));
        let x2 = tape.leaf(t2(&[shifted]));
        let y1 = tape.layer_norm(x1, g, b, 1e-5).unwrap();
        let y2 = tape.layer_norm(x2, g, b, 1e-5).unwrap();
        assert_close(
            tape.value(y1).data(),
            tape.value(y2).data(),
            1e-10,
            "ln shift invariance",
        );
    }

    #[test]
    fn relu_and_mean_pool_and_concat() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 3.0]);

        let c = tape.leaf(t2(&[vec![2.0, 5.0], vec![2.0, 5.0], vec![2.0, 5.0]]));
        let pooled = tape.mean_pool_time(c).unwrap();
        assert_eq!(tape.value(pooled).data(), &[2.0, 5.0]);

        let a = tape.leaf(t2(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let b = tape.leaf(t2(&[vec![7.0, 8.0], vec![9.0, 10.0]]));
        let cat = tape.concat_last_dim(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[2, 5]);
        assert_eq!(
            tape.value(cat).data(),
            &[1.0, 2.0, 3.0, 7.0, 8.0, 4.0, 5.0, 6.0, 9.0, 10.0]
        );
    }

    #[test]
    fn slice_tokens_bounds() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 2]));
        assert!(tape.slice_tokens(x, 4).is_ok());
        assert!(tape.slice_tokens(x, 5).is_err());
        assert!(tape.slice_tokens(x, 0).is_err());
    }

    #[test]
    fn backward_relu_subgradient_zero_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        let r = tape.relu(x).unwrap();
        let loss = tape.sum(r).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_matmul_linear_map() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.leaf(t2(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        // dA = 1 * B^T, dB = A^T * 1
        assert_eq!(grads.wrt(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn backward_sum_of_losses_is_additive() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![0.5, -1.5, 2.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let l1 = tape.sum(sq).unwrap();
        let r = tape.relu(x).unwrap();
        let l2 = tape.sum(r).unwrap();
        let l3 = tape.add(l1, l2).unwrap();

        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();
        let g3 = tape.backward(l3).unwrap();
        for i in 0..3 {
            let want = g1.wrt(x).unwrap().data()[i] + g2.wrt(x).unwrap().data()[i];
            let got = g3.wrt(x).unwrap().data()[i];
            assert!((want - got).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = Parameter {
            name: "used".into(),
            value: Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(),
            trainable: true,
        };
        let unused = Parameter {
            name: "unused".into(),
            value: Tensor::zeros(&[3]),
            trainable: true,
        };
        let u = tape.param(&used);
        let _nu = tape.param(&unused);
        let sq = tape.mul(u, u).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward_params(loss).unwrap();
        assert_eq!(grads["used"].data(), &[2.0, 4.0]);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn embed_lookup_gathers_and_scatters() {
        let mut tape = Tape::new();
        let table = tape.leaf(t2(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let e = tape.embed_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(e).unwrap();
        let grads = tape.backward(loss).unwrap();
        // row 2 hit twice, row 0 once, row 1 never
        assert_eq!(grads.wrt(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        assert!(matches!(
            tape.embed_lookup(table, &[3]),
            Err(Error::Vocab { id: 3, vocab: 3 })
        ));
    }

    #[test]
    fn same_op_sequence_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(t2(&[vec![0.1, 0.2], vec![0.3, 0.4]]));
            let b = tape.leaf(t2(&[vec![-1.0, 0.5], vec![2.0, -0.25]]));
            let m = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(m).unwrap();
            let g = tape.leaf(Tensor::full(&[2], 1.0));
            let z = tape.leaf(Tensor::zeros(&[2]));
            let l = tape.layer_norm(s, g, z, 1e-5).unwrap();
            tape.value(l).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn madds_counter_is_definitional() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[3, 5]));
        let b = tape.leaf(Tensor::zeros(&[5, 7]));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.madds(), 3 * 5 * 7);
    }
}

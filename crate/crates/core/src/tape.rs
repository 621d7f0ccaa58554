//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of a forward pass as a node; calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients.
//! Graphs are rebuilt per forward pass, which keeps autoregressive rollouts
//! (where outputs feed back into later steps) straightforward.
//!
//! Parameters live outside the tape in a [`ParamStore`]; [`Tape::param`]
//! copies the current value in as a watched leaf so gradients can be exported
//! back per parameter after the sweep.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    Add(Var, Var),
    /// Matrix plus a `[1, n]` row broadcast over all rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    /// Minimum entry of a `[n, 1]` column; subgradient to the first argmin.
    MinCol(Var),
    /// `out[r] = in[r, indices[r]]` as an `[n, 1]` column.
    PickPerRow(Var, Vec<usize>),
    /// Additive attention scores: `out[k,m] = w . tanh(feat[m] + query[k])`.
    AttnScores { feat: Var, query: Var, w: Var },
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, pad: usize },
    /// `[c,h,w]` feature map to a `[h*w, c]` matrix of per-cell vectors.
    CellsFromChw(Var),
    Reshape(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.idx()].as_ref()
    }

    /// Add `scale` times each watched parameter's gradient into `acc`
    /// (a store aligned with the parameter store).
    pub fn accumulate_params(&self, tape: &Tape, acc: &mut ParamStore, scale: f64) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = &self.grads[i] {
                    acc.tensor_mut(pid).add_scaled(g, scale);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(1024), grad_enabled: true }
    }

    /// A tape that records values only; `backward` on it is an error.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::with_capacity(1024), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx()].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite() || !self.grad_enabled, "non-finite value from {:?}", op);
        let needs_grad = needs_grad && self.grad_enabled;
        self.nodes.push(Node { value, op, needs_grad });
        Var((self.nodes.len() - 1) as u32)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// A leaf whose gradient is tracked (e.g. noise in a gradient check).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.tensor(id).clone(), Op::Leaf { param: Some(id) }, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b), false, false);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.dims(), tb.dims(), "add shape mismatch");
        let mut v = ta.clone();
        v.add_scaled(tb, 1.0);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1, "bias must be a single row");
        assert_eq!(ta.cols(), tr.cols(), "add_row width mismatch");
        let cols = ta.cols();
        let mut v = ta.clone();
        for r in 0..v.rows() {
            for c in 0..cols {
                let x = v.at(r, c) + tr.at(0, c);
                v.set(r, c, x);
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.dims(), tb.dims(), "sub shape mismatch");
        let mut v = ta.clone();
        v.add_scaled(tb, -1.0);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.dims(), tb.dims(), "mul shape mismatch");
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(ta.dims().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(&[rows, total]);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            let w = t.cols();
            for r in 0..rows {
                for c in 0..w {
                    v.set(r, off + c, t.at(r, c));
                }
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(start < end && end <= t.cols(), "slice_cols out of range");
        let rows = t.rows();
        let mut v = Tensor::zeros(&[rows, end - start]);
        for r in 0..rows {
            for c in start..end {
                v.set(r, c - start, t.at(r, c));
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::SliceCols(a, start, end), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut v = t.clone();
        for r in 0..v.rows() {
            softmax_row_inplace(v.data_mut(), r, t.cols());
        }
        let ng = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut v = t.clone();
        for r in 0..v.rows() {
            let row = &mut v.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.needs(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let rows = t.rows();
        let mut v = Tensor::zeros(&[rows, 1]);
        for r in 0..rows {
            let s: f64 = t.row_slice(r).iter().sum();
            v.set(r, 0, s);
        }
        let ng = self.needs(a);
        self.push(v, Op::SumCols(a), ng)
    }

    pub fn min_col(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.cols(), 1, "min_col wants a column");
        let m = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let ng = self.needs(a);
        self.push(Tensor::scalar(m), Op::MinCol(a), ng)
    }

    pub fn pick_per_row(&mut self, a: Var, indices: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), indices.len(), "one index per row");
        let mut v = Tensor::zeros(&[indices.len(), 1]);
        for (r, &c) in indices.iter().enumerate() {
            v.set(r, 0, t.at(r, c));
        }
        let ng = self.needs(a);
        self.push(v, Op::PickPerRow(a, indices.to_vec()), ng)
    }

    /// Fused additive attention scores over projected features and queries.
    ///
    /// `feat` is `[m, a]`, `query` is `[k, a]`, `w` is `[1, a]`; the result is
    /// `[k, m]` with `out[k,m] = sum_a w[a] * tanh(feat[m,a] + query[k,a])`.
    pub fn attn_scores(&mut self, feat: Var, query: Var, w: Var) -> Var {
        let (tf, tq, tw) = (self.value(feat), self.value(query), self.value(w));
        let a = tf.cols();
        assert_eq!(tq.cols(), a, "attention width mismatch");
        assert_eq!(tw.cols(), a, "attention weight width mismatch");
        assert_eq!(tw.rows(), 1);
        let (m, k) = (tf.rows(), tq.rows());
        let mut v = Tensor::zeros(&[k, m]);
        for ki in 0..k {
            let qrow = tq.row_slice(ki);
            for mi in 0..m {
                let frow = tf.row_slice(mi);
                let mut s = 0.0;
                for ai in 0..a {
                    s += tw.at(0, ai) * (frow[ai] + qrow[ai]).tanh();
                }
                v.set(ki, mi, s);
            }
        }
        let ng = self.needs(feat) || self.needs(query) || self.needs(w);
        self.push(v, Op::AttnScores { feat, query, w }, ng)
    }

    /// Single-image 2-D convolution: input `[ci,h,w]`, weight `[co,ci,kh,kw]`,
    /// bias `[1,co]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let v = conv2d_forward(self.value(input), self.value(weight), self.value(bias), stride, pad);
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(v, Op::Conv2d { input, weight, bias, stride, pad }, ng)
    }

    pub fn cells_from_chw(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.dims();
        assert_eq!(d.len(), 3, "cells_from_chw wants [c,h,w]");
        let (c, h, w) = (d[0], d[1], d[2]);
        let mut v = Tensor::zeros(&[h * w, c]);
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    v.set(hi * w + wi, ci, t.data()[ci * h * w + hi * w + wi]);
                }
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::CellsFromChw(a), ng)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Var {
        let v = self.value(a).reshaped(dims);
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a, dims.to_vec()), ng)
    }

    // -- composite helpers ---------------------------------------------------

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn linear_relu(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.linear(x, w, b);
        self.relu(y)
    }

    /// Weighted accumulation `sum_i coeff_i * term_i` of scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut acc = self.scale(terms[0].0, terms[0].1);
        for &(t, c) in &terms[1..] {
            let s = self.scale(t, c);
            acc = self.add(acc, s);
        }
        acc
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep seeding `d root = 1`. The root must be scalar.
    pub fn backward(&mut self, root: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.idx()] = Some(Tensor::scalar(1.0));

        for i in (0..=root.idx()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.idx()] {
            Some(g) => g.add_scaled(&contrib, 1.0),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    let da = matmul(g, self.value(b), false, true);
                    self.accum(grads, a, da);
                }
                if self.needs(b) {
                    let db = matmul(self.value(a), g, true, false);
                    self.accum(grads, b, db);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, a, g.clone());
                self.accum(grads, b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accum(grads, a, g.clone());
                if self.needs(row) {
                    let mut dr = Tensor::zeros(&[1, g.cols()]);
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let v = dr.at(0, c) + g.at(r, c);
                            dr.set(0, c, v);
                        }
                    }
                    self.accum(grads, row, dr);
                }
            }
            Op::Sub(a, b) => {
                self.accum(grads, a, g.clone());
                if self.needs(b) {
                    self.accum(grads, b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let tb = self.value(b);
                    let data = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, a, Tensor::new(g.dims().to_vec(), data));
                }
                if self.needs(b) {
                    let ta = self.value(a);
                    let data = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, b, Tensor::new(g.dims().to_vec(), data));
                }
            }
            Op::Scale(a, s) => self.accum(grads, a, g.map(|x| x * s)),
            Op::Relu(a) => {
                let y = &self.nodes[i].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gd, yd)| if *yd > 0.0 { *gd } else { 0.0 })
                    .collect();
                self.accum(grads, a, Tensor::new(g.dims().to_vec(), data));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gd, yd)| gd * (1.0 - yd * yd))
                    .collect();
                self.accum(grads, a, Tensor::new(g.dims().to_vec(), data));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gd, yd)| gd * yd * (1.0 - yd))
                    .collect();
                self.accum(grads, a, Tensor::new(g.dims().to_vec(), data));
            }
            Op::Ln(a) => {
                let x = self.value(a);
                let data = g.data().iter().zip(x.data()).map(|(gd, xd)| gd / xd).collect();
                self.accum(grads, a, Tensor::new(g.dims().to_vec(), data));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gd, xd)| if *xd > lo && *xd < hi { *gd } else { 0.0 })
                    .collect();
                self.accum(grads, a, Tensor::new(g.dims().to_vec(), data));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in &parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let rows = g.rows();
                        let mut dp = Tensor::zeros(&[rows, w]);
                        for r in 0..rows {
                            for c in 0..w {
                                dp.set(r, c, g.at(r, off + c));
                            }
                        }
                        self.accum(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start, _end) => {
                let ta = self.value(a);
                let mut da = Tensor::zeros(&[ta.rows(), ta.cols()]);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        da.set(r, start + c, g.at(r, c));
                    }
                }
                self.accum(grads, a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let cols = y.cols();
                let mut da = Tensor::zeros(&[y.rows(), cols]);
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        da.set(r, c, yr[c] * (gr[c] - dot));
                    }
                }
                self.accum(grads, a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let cols = y.cols();
                let mut da = Tensor::zeros(&[y.rows(), cols]);
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        da.set(r, c, gr[c] - yr[c].exp() * gsum);
                    }
                }
                self.accum(grads, a, da);
            }
            Op::SumAll(a) => {
                let ta = self.value(a);
                let s = g.scalar_value();
                self.accum(grads, a, Tensor::new(ta.dims().to_vec(), vec![s; ta.len()]));
            }
            Op::MeanAll(a) => {
                let ta = self.value(a);
                let s = g.scalar_value() / ta.len() as f64;
                self.accum(grads, a, Tensor::new(ta.dims().to_vec(), vec![s; ta.len()]));
            }
            Op::SumCols(a) => {
                let ta = self.value(a);
                let mut da = Tensor::zeros(&[ta.rows(), ta.cols()]);
                for r in 0..ta.rows() {
                    let gr = g.at(r, 0);
                    for c in 0..ta.cols() {
                        da.set(r, c, gr);
                    }
                }
                self.accum(grads, a, da);
            }
            Op::MinCol(a) => {
                let ta = self.value(a);
                let mut best = 0;
                for r in 1..ta.rows() {
                    if ta.at(r, 0) < ta.at(best, 0) {
                        best = r;
                    }
                }
                let mut da = Tensor::zeros(&[ta.rows(), 1]);
                da.set(best, 0, g.scalar_value());
                self.accum(grads, a, da);
            }
            Op::PickPerRow(a, indices) => {
                let ta = self.value(a);
                let mut da = Tensor::zeros(&[ta.rows(), ta.cols()]);
                for (r, &c) in indices.iter().enumerate() {
                    da.set(r, c, g.at(r, 0));
                }
                self.accum(grads, a, da);
            }
            Op::AttnScores { feat, query, w } => {
                let (tf, tq, tw) = (self.value(feat), self.value(query), self.value(w));
                let a = tf.cols();
                let (m, k) = (tf.rows(), tq.rows());
                let mut df = Tensor::zeros(&[m, a]);
                let mut dq = Tensor::zeros(&[k, a]);
                let mut dw = Tensor::zeros(&[1, a]);
                for ki in 0..k {
                    let qrow = tq.row_slice(ki);
                    for mi in 0..m {
                        let go = g.at(ki, mi);
                        if go == 0.0 {
                            continue;
                        }
                        let frow = tf.row_slice(mi);
                        for ai in 0..a {
                            let t = (frow[ai] + qrow[ai]).tanh();
                            let common = go * tw.at(0, ai) * (1.0 - t * t);
                            df.set(mi, ai, df.at(mi, ai) + common);
                            dq.set(ki, ai, dq.at(ki, ai) + common);
                            dw.set(0, ai, dw.at(0, ai) + go * t);
                        }
                    }
                }
                self.accum(grads, feat, df);
                self.accum(grads, query, dq);
                self.accum(grads, w, dw);
            }
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let (di, dw, db) =
                    conv2d_backward(self.value(input), self.value(weight), g, stride, pad);
                self.accum(grads, input, di);
                self.accum(grads, weight, dw);
                self.accum(grads, bias, db);
            }
            Op::CellsFromChw(a) => {
                let ta = self.value(a);
                let d = ta.dims();
                let (c, h, w) = (d[0], d[1], d[2]);
                let mut da = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            da.data_mut()[ci * h * w + hi * w + wi] = g.at(hi * w + wi, ci);
                        }
                    }
                }
                self.accum(grads, a, da);
            }
            Op::Reshape(a, _) => {
                let da = g.reshaped(self.value(a).dims());
                self.accum(grads, a, da);
            }
        }
    }
}

fn softmax_row_inplace(data: &mut [f64], r: usize, cols: usize) {
    let row = &mut data[r * cols..(r + 1) * cols];
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let id = input.dims();
    let wd = weight.dims();
    assert_eq!(id.len(), 3, "conv input must be [ci,h,w]");
    assert_eq!(wd.len(), 4, "conv weight must be [co,ci,kh,kw]");
    assert_eq!(id[0], wd[1], "conv channel mismatch");
    let (ci, h, w) = (id[0], id[1], id[2]);
    let (co, kh, kw) = (wd[0], wd[2], wd[3]);
    assert_eq!(bias.len(), co);
    let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad));
    let mut out = Tensor::zeros(&[co, ho, wo]);
    let x = input.data();
    let k = weight.data();
    let o = out.data_mut();
    for oc in 0..co {
        let b = bias.data()[oc];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b;
                for ic in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[ic * h * w + iy as usize * w + ix as usize]
                                * k[((oc * ci + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                o[oc * ho * wo + oy * wo + ox] = acc;
            }
        }
    }
    out
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let id = input.dims();
    let wd = weight.dims();
    let (ci, h, w) = (id[0], id[1], id[2]);
    let (co, kh, kw) = (wd[0], wd[2], wd[3]);
    let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad));
    let mut din = Tensor::zeros(&[ci, h, w]);
    let mut dwt = Tensor::zeros(&[co, ci, kh, kw]);
    let mut dbs = Tensor::zeros(&[1, co]);
    let x = input.data();
    let k = weight.data();
    let g = gout.data();
    for oc in 0..co {
        let mut bacc = 0.0;
        for oy in 0..ho {
            for ox in 0..wo {
                let go = g[oc * ho * wo + oy * wo + ox];
                if go == 0.0 {
                    continue;
                }
                bacc += go;
                for ic in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = ic * h * w + iy as usize * w + ix as usize;
                            let wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                            din.data_mut()[xi] += go * k[wi];
                            dwt.data_mut()[wi] += go * x[xi];
                        }
                    }
                }
            }
        }
        dbs.data_mut()[oc] += bacc;
    }
    (din, dwt, dbs)
}

/// Central-difference gradient check helpers used by unit and acceptance tests.
pub mod gradcheck {
    use crate::params::{ParamStore, ParamId};

    /// Below this magnitude a coordinate's gradient is treated as zero: the
    /// central-difference estimate is dominated by f64 cancellation there and
    /// a relative comparison is meaningless.
    pub const ZERO_GRAD_ATOL: f64 = 1e-6;

    /// Largest relative error between analytic parameter gradients and central
    /// finite differences of `loss_fn` over every entry of the listed params.
    ///
    /// `loss_fn` must evaluate the scalar loss from the store alone (it is
    /// invoked repeatedly with perturbed copies). `grads` is a store aligned
    /// with `params` holding the analytic gradient.
    pub fn max_rel_error(
        params: &ParamStore,
        grads: &ParamStore,
        ids: &[ParamId],
        eps: f64,
        mut loss_fn: impl FnMut(&ParamStore) -> f64,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        let mut work = params.clone();
        for &id in ids {
            let n = params.tensor(id).len();
            for j in 0..n {
                let orig = params.tensor(id).data()[j];
                work.tensor_mut(id).data_mut()[j] = orig + eps;
                let up = loss_fn(&work);
                work.tensor_mut(id).data_mut()[j] = orig - eps;
                let down = loss_fn(&work);
                work.tensor_mut(id).data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.tensor(id).data()[j];
                let denom = numeric.abs().max(analytic.abs());
                if denom > ZERO_GRAD_ATOL {
                    let rel = (numeric - analytic).abs() / denom;
                    if rel > worst {
                        worst = rel;
                    }
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(dims: &[(&str, Vec<usize>)], rng: &mut ChaCha8Rng) -> (ParamStore, Vec<ParamId>) {
        let mut ps = ParamStore::new();
        let ids = dims
            .iter()
            .map(|(name, d)| ps.add(name, Tensor::randn(d, 0.5, rng)))
            .collect();
        (ps, ids)
    }

    #[test]
    fn simple_chain_gradients() {
        // f = sum(tanh(x @ w)) ; df/dw known in closed form via tape vs FD.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (store, ids) = store_with(&[("w", vec![3, 2])], &mut rng);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);

        let loss = |ps: &ParamStore| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.param(ps, ids[0]);
            let y = t.matmul(xv, wv);
            let z = t.tanh(y);
            let s = t.sum_all(z);
            t.value(s).scalar_value()
        };

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(&store, ids[0]);
        let y = tape.matmul(xv, wv);
        let z = tape.tanh(y);
        let s = tape.sum_all(z);
        let grads = tape.backward(s);
        let mut acc = store.zeros_like();
        grads.accumulate_params(&tape, &mut acc, 1.0);

        let err = gradcheck::max_rel_error(&store, &acc, &ids, 1e-6, loss);
        assert!(err < 1e-7, "rel err {}", err);
    }

    #[test]
    fn fused_ops_match_fd() {
        // Composite touching attention scores, softmax, concat, slicing, min.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (store, ids) = store_with(
            &[
                ("feat", vec![5, 3]),
                ("query", vec![2, 3]),
                ("w", vec![1, 3]),
                ("v", vec![5, 4]),
            ],
            &mut rng,
        );

        let build = |ps: &ParamStore, t: &mut Tape| -> Var {
            let f = t.param(ps, ids[0]);
            let q = t.param(ps, ids[1]);
            let w = t.param(ps, ids[2]);
            let v = t.param(ps, ids[3]);
            let scores = t.attn_scores(f, q, w);
            let probs = t.softmax_rows(scores);
            let ctx = t.matmul(probs, v); // [2,4]
            let left = t.slice_cols(ctx, 0, 2);
            let right = t.slice_cols(ctx, 2, 4);
            let cat = t.concat_cols(&[left, right]);
            let sq = t.mul(cat, cat);
            let per_row = t.sum_cols(sq);
            t.min_col(per_row)
        };

        let mut tape = Tape::new();
        let root = build(&store, &mut tape);
        let grads = tape.backward(root);
        let mut acc = store.zeros_like();
        grads.accumulate_params(&tape, &mut acc, 1.0);

        let err = gradcheck::max_rel_error(&store, &acc, &ids, 1e-6, |ps| {
            let mut t = Tape::new();
            let r = build(ps, &mut t);
            t.value(r).scalar_value()
        });
        assert!(err < 1e-6, "rel err {}", err);
    }

    #[test]
    fn conv_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", Tensor::randn(&[2, 1, 3, 3], 0.4, &mut rng));
        let b1 = store.add("b1", Tensor::randn(&[1, 2], 0.1, &mut rng));
        let img = Tensor::randn(&[1, 6, 6], 1.0, &mut rng);

        let build = |ps: &ParamStore, t: &mut Tape| -> Var {
            let x = t.constant(img.clone());
            let w = t.param(ps, w1);
            let b = t.param(ps, b1);
            let y = t.conv2d(x, w, b, 2, 1);
            let cells = t.cells_from_chw(y);
            let act = t.tanh(cells);
            t.sum_all(act)
        };

        let mut tape = Tape::new();
        let root = build(&store, &mut tape);
        let grads = tape.backward(root);
        let mut acc = store.zeros_like();
        grads.accumulate_params(&tape, &mut acc, 1.0);

        let err = gradcheck::max_rel_error(&store, &acc, &[w1, b1], 1e-6, |ps| {
            let mut t = Tape::new();
            let r = build(ps, &mut t);
            t.value(r).scalar_value()
        });
        assert!(err < 1e-6, "rel err {}", err);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 3.0, 3.0]));
        let s = t.softmax_rows(x);
        for r in 0..2 {
            let sum: f64 = t.value(s).row_slice(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!((t.value(s).at(1, 0) - 1.0 / 3.0).abs() < 1e-12);
    }
}

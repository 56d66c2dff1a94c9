//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass into a flat arena.
//! Trainable tensors live in a [`ParamStore`] and enter a tape through
//! [`Tape::param`] (the whole tensor) or [`Tape::param_row`] (one row, for
//! embedding lookups). [`Tape::backward`] walks the arena in reverse and
//! returns dense per-parameter gradients.
//!
//! Vectors are `n x 1` tensors; scalars are `1 x 1`.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Index of a tensor inside a [`ParamStore`].
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> std::ops::Range<ParamId> {
        0..self.tensors.len()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Dense gradients keyed by parameter id. Absent entries are zero.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Mutable access, allocating a zero buffer of `len` entries on first use.
    pub fn entry(&mut self, id: ParamId, len: usize) -> &mut [f64] {
        if self.grads.len() <= id {
            self.grads.resize(id + 1, None);
        }
        self.grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_deref().map(|g| (i, g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Drops the gradient of `id` so optimizers leave it untouched.
    pub fn remove(&mut self, id: ParamId) {
        if let Some(g) = self.grads.get_mut(id) {
            *g = None;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Pointwise nonlinearities selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Identity => x,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Input,
    Param(ParamId),
    ParamRow(ParamId, usize, usize),
    MatVec(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Lerp(Var, Var, Var),
    Act(Var, Activation),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    LogSigmoid(Var),
    Floor(Var, f64),
    Concat(usize, usize),
    Slice(Var, usize),
    Dot(Var, Var),
    Sum(Var),
    SqNorm(Var),
    Softmax(Var),
    WeightedSum(Var, usize, usize),
    MaxPool(usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Node {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<f64>,
    args: Vec<Var>,
    param_vars: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes but keeps the allocations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.values.clear();
        self.args.clear();
        self.param_vars.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        &self.values[n.offset..n.offset + n.len()]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        debug_assert_eq!(n.len(), 1);
        self.values[n.offset]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Length of a vector node.
    pub fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].len()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: impl IntoIterator<Item = f64>) -> Var {
        let offset = self.values.len();
        self.values.extend(data);
        debug_assert_eq!(self.values.len() - offset, rows * cols);
        self.nodes.push(Node { op, offset, rows, cols });
        Var(self.nodes.len() - 1)
    }

    fn push_zeroed(&mut self, op: Op, rows: usize, cols: usize) -> (Var, usize) {
        let offset = self.values.len();
        self.values.resize(offset + rows * cols, 0.0);
        self.nodes.push(Node { op, offset, rows, cols });
        (Var(self.nodes.len() - 1), offset)
    }

    fn range(&self, v: Var) -> std::ops::Range<usize> {
        let n = &self.nodes[v.0];
        n.offset..n.offset + n.len()
    }

    /// Constant vector input (no gradient is propagated past it).
    pub fn input(&mut self, data: &[f64]) -> Var {
        self.push(Op::Input, data.len(), 1, data.iter().copied())
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.push_zeroed(Op::Input, n, 1).0
    }

    /// Whole parameter tensor; cached so each parameter appears once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(Op::Param(id), t.rows, t.cols, t.data.iter().copied());
        self.param_vars.insert(id, v);
        v
    }

    /// One row of a parameter matrix, as a column vector.
    pub fn param_row(&mut self, store: &ParamStore, id: ParamId, row: usize) -> Var {
        let t = store.get(id);
        assert!(row < t.rows, "row {row} out of range for {}x{} parameter", t.rows, t.cols);
        let (rows, cols) = (t.rows, t.cols);
        self.push(Op::ParamRow(id, row, rows), cols, 1, t.row(row).iter().copied())
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (m, n) = self.shape(w);
        assert_eq!(self.dim(x), n, "matvec shape mismatch");
        let (out, off) = self.push_zeroed(Op::MatVec(w, x), m, 1);
        let (wr, xr) = (self.range(w), self.range(x));
        for i in 0..m {
            let row = &self.values[wr.start + i * n..wr.start + (i + 1) * n];
            let xs = &self.values[xr.clone()];
            let acc: f64 = row.iter().zip(xs).map(|(a, b)| a * b).sum();
            self.values[off + i] = acc;
        }
        out
    }

    /// `w x + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Var {
        let (m, n) = self.shape(w);
        assert_eq!(self.dim(x), n, "affine input mismatch");
        assert_eq!(self.dim(b), m, "affine bias mismatch");
        let (out, off) = self.push_zeroed(Op::Affine(w, x, b), m, 1);
        let (wr, xr, br) = (self.range(w), self.range(x), self.range(b));
        for i in 0..m {
            let row = &self.values[wr.start + i * n..wr.start + (i + 1) * n];
            let xs = &self.values[xr.clone()];
            let acc: f64 = row.iter().zip(xs).map(|(a, b)| a * b).sum();
            self.values[off + i] = acc + self.values[br.start + i];
        }
        out
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "elementwise shape mismatch");
        let (rows, cols) = self.shape(a);
        let (ar, br) = (self.range(a), self.range(b));
        let data: Vec<f64> = self.values[ar].iter().zip(&self.values[br]).map(|(&x, &y)| f(x, y)).collect();
        self.push(op, rows, cols, data)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let (rows, cols) = self.shape(a);
        let ar = self.range(a);
        let data: Vec<f64> = self.values[ar].iter().map(|&x| f(x)).collect();
        self.push(op, rows, cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(a, c), a, |x| x * c)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Offset(a), a, |x| x + c)
    }

    /// `(1 - z) * a + z * b`, elementwise.
    pub fn lerp(&mut self, z: Var, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(z), self.dim(a));
        assert_eq!(self.dim(a), self.dim(b));
        let (rows, cols) = self.shape(a);
        let (zr, ar, br) = (self.range(z), self.range(a), self.range(b));
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| {
                let zi = self.values[zr.start + i];
                (1.0 - zi) * self.values[ar.start + i] + zi * self.values[br.start + i]
            })
            .collect();
        self.push(Op::Lerp(z, a, b), rows, cols, data)
    }

    pub fn act(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        self.unary(Op::Act(a, act), a, |x| act.apply(x))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.act(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.act(a, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.act(a, Activation::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Op::Ln(a), a, f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Op::Sqrt(a), a, f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::LogSigmoid(a), a, |x| -softplus(-x))
    }

    /// `max(a, floor)`; gradient passes only where `a > floor`.
    pub fn floor(&mut self, a: Var, floor: f64) -> Var {
        self.unary(Op::Floor(a, floor), a, |x| x.max(floor))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let start = self.args.len();
        self.args.extend_from_slice(parts);
        let total: usize = parts.iter().map(|&p| self.dim(p)).sum();
        let mut data = Vec::with_capacity(total);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        self.push(Op::Concat(start, parts.len()), total, 1, data)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.dim(a), "slice out of range");
        let r = self.range(a);
        let data: Vec<f64> = self.values[r.start + start..r.start + start + len].to_vec();
        self.push(Op::Slice(a, start), len, 1, data)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "dot shape mismatch");
        let s: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a, b), 1, 1, [s])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push(Op::Sum(a), 1, 1, [s])
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|x| x * x).sum();
        self.push(Op::SqNorm(a), 1, 1, [s])
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let stacked = self.concat(terms);
        self.sum(stacked)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let xs = self.value(a);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let n = exps.len();
        self.push(Op::Softmax(a), n, 1, exps.into_iter().map(|e| e / z))
    }

    /// `sum_k weights[k] * items[k]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Var {
        assert_eq!(self.dim(weights), items.len(), "one weight per item");
        assert!(!items.is_empty(), "weighted sum over no items");
        let d = self.dim(items[0]);
        let start = self.args.len();
        self.args.extend_from_slice(items);
        let mut data = vec![0.0; d];
        let w = self.value(weights).to_vec();
        for (k, &item) in items.iter().enumerate() {
            assert_eq!(self.dim(item), d, "weighted sum items differ in length");
            for (acc, &x) in data.iter_mut().zip(self.value(item)) {
                *acc += w[k] * x;
            }
        }
        self.push(Op::WeightedSum(weights, start, items.len()), d, 1, data)
    }

    /// Elementwise maximum over vectors of equal length.
    pub fn max_pool(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty(), "max pool over no items");
        let d = self.dim(items[0]);
        let start = self.args.len();
        self.args.extend_from_slice(items);
        let mut data = vec![f64::NEG_INFINITY; d];
        for &item in items {
            assert_eq!(self.dim(item), d, "max pool items differ in length");
            for (acc, &x) in data.iter_mut().zip(self.value(item)) {
                *acc = acc.max(x);
            }
        }
        self.push(Op::MaxPool(start, items.len()), d, 1, data)
    }

    /// Gradients of the scalar `loss` with respect to every parameter on the tape.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.dim(loss), 1, "backward needs a scalar");
        let mut grads = vec![0.0; self.values.len()];
        grads[self.nodes[loss.0].offset] = 1.0;
        let mut out = Gradients::default();
        let vals = &self.values;

        for idx in (0..=loss.0).rev() {
            let node = self.nodes[idx];
            let (lo, hi) = grads.split_at_mut(node.offset);
            let g = &hi[..node.len()];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let y = &vals[node.offset..node.offset + node.len()];
            let r = |v: Var| {
                let n = &self.nodes[v.0];
                n.offset..n.offset + n.len()
            };
            match node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let dst = out.entry(id, g.len());
                    for (d, &s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                Op::ParamRow(id, row, rows) => {
                    let cols = g.len();
                    let buf = out.entry(id, rows * cols);
                    for (d, &s) in buf[row * cols..(row + 1) * cols].iter_mut().zip(g) {
                        *d += s;
                    }
                }
                Op::MatVec(w, x) | Op::Affine(w, x, _) => {
                    let (m, n) = (self.nodes[w.0].rows, self.nodes[w.0].cols);
                    let (wr, xr) = (r(w), r(x));
                    let xv = &vals[xr.clone()];
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let wrow = &vals[wr.start + i * n..wr.start + (i + 1) * n];
                        let gw = &mut lo[wr.start + i * n..wr.start + (i + 1) * n];
                        for j in 0..n {
                            gw[j] += gi * xv[j];
                        }
                        let gx = &mut lo[xr.clone()];
                        for j in 0..n {
                            gx[j] += gi * wrow[j];
                        }
                    }
                    if let Op::Affine(_, _, b) = node.op {
                        let br = r(b);
                        for (d, &s) in lo[br].iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(lo, r(a), g, |_, s| s);
                    acc(lo, r(b), g, |_, s| s);
                }
                Op::Sub(a, b) => {
                    acc(lo, r(a), g, |_, s| s);
                    acc(lo, r(b), g, |_, s| -s);
                }
                Op::Mul(a, b) => {
                    let (ar, br) = (r(a), r(b));
                    for i in 0..g.len() {
                        lo[ar.start + i] += g[i] * vals[br.start + i];
                        lo[br.start + i] += g[i] * vals[ar.start + i];
                    }
                }
                Op::Div(a, b) => {
                    let (ar, br) = (r(a), r(b));
                    for i in 0..g.len() {
                        let bv = vals[br.start + i];
                        lo[ar.start + i] += g[i] / bv;
                        lo[br.start + i] -= g[i] * vals[ar.start + i] / (bv * bv);
                    }
                }
                Op::Scale(a, c) => acc(lo, r(a), g, |_, s| s * c),
                Op::Offset(a) => acc(lo, r(a), g, |_, s| s),
                Op::Lerp(z, a, b) => {
                    let (zr, ar, br) = (r(z), r(a), r(b));
                    for i in 0..g.len() {
                        let zi = vals[zr.start + i];
                        lo[ar.start + i] += g[i] * (1.0 - zi);
                        lo[br.start + i] += g[i] * zi;
                        lo[zr.start + i] += g[i] * (vals[br.start + i] - vals[ar.start + i]);
                    }
                }
                Op::Act(a, act) => {
                    let ar = r(a);
                    for i in 0..g.len() {
                        let x = vals[ar.start + i];
                        let d = match act {
                            Activation::Tanh => 1.0 - y[i] * y[i],
                            Activation::Sigmoid => y[i] * (1.0 - y[i]),
                            Activation::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Softplus => sigmoid(x),
                            Activation::Identity => 1.0,
                        };
                        lo[ar.start + i] += g[i] * d;
                    }
                }
                Op::Exp(a) => {
                    let ar = r(a);
                    for i in 0..g.len() {
                        lo[ar.start + i] += g[i] * y[i];
                    }
                }
                Op::Ln(a) => {
                    let ar = r(a);
                    for i in 0..g.len() {
                        lo[ar.start + i] += g[i] / vals[ar.start + i];
                    }
                }
                Op::Sqrt(a) => {
                    let ar = r(a);
                    for i in 0..g.len() {
                        lo[ar.start + i] += g[i] * 0.5 / y[i];
                    }
                }
                Op::Square(a) => {
                    let ar = r(a);
                    for i in 0..g.len() {
                        lo[ar.start + i] += g[i] * 2.0 * vals[ar.start + i];
                    }
                }
                Op::LogSigmoid(a) => {
                    let ar = r(a);
                    for i in 0..g.len() {
                        lo[ar.start + i] += g[i] * (1.0 - sigmoid(vals[ar.start + i]));
                    }
                }
                Op::Floor(a, floor) => {
                    let ar = r(a);
                    for i in 0..g.len() {
                        if vals[ar.start + i] > floor {
                            lo[ar.start + i] += g[i];
                        }
                    }
                }
                Op::Concat(start, count) => {
                    let mut pos = 0;
                    for &p in &self.args[start..start + count] {
                        let pr = r(p);
                        let len = pr.len();
                        for (d, &s) in lo[pr].iter_mut().zip(&g[pos..pos + len]) {
                            *d += s;
                        }
                        pos += len;
                    }
                }
                Op::Slice(a, start) => {
                    let ar = r(a);
                    for i in 0..g.len() {
                        lo[ar.start + start + i] += g[i];
                    }
                }
                Op::Dot(a, b) => {
                    let (ar, br) = (r(a), r(b));
                    for i in 0..ar.len() {
                        lo[ar.start + i] += g[0] * vals[br.start + i];
                        lo[br.start + i] += g[0] * vals[ar.start + i];
                    }
                }
                Op::Sum(a) => {
                    for d in &mut lo[r(a)] {
                        *d += g[0];
                    }
                }
                Op::SqNorm(a) => {
                    let ar = r(a);
                    for i in 0..ar.len() {
                        lo[ar.start + i] += g[0] * 2.0 * vals[ar.start + i];
                    }
                }
                Op::Softmax(a) => {
                    let ar = r(a);
                    let gy: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for i in 0..g.len() {
                        lo[ar.start + i] += y[i] * (g[i] - gy);
                    }
                }
                Op::WeightedSum(w, start, count) => {
                    let wr = r(w);
                    for (k, &item) in self.args[start..start + count].iter().enumerate() {
                        let ir = r(item);
                        let wk = vals[wr.start + k];
                        let mut gw = 0.0;
                        for i in 0..g.len() {
                            gw += g[i] * vals[ir.start + i];
                            lo[ir.start + i] += wk * g[i];
                        }
                        lo[wr.start + k] += gw;
                    }
                }
                Op::MaxPool(start, count) => {
                    let items = &self.args[start..start + count];
                    for i in 0..g.len() {
                        // first item attaining the max receives the gradient
                        if let Some(&winner) = items.iter().find(|&&it| vals[r(it).start + i] == y[i]) {
                            lo[r(winner).start + i] += g[i];
                        }
                    }
                }
            }
        }
        out
    }
}

fn acc(lo: &mut [f64], dst: std::ops::Range<usize>, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (i, d) in lo[dst].iter_mut().enumerate() {
        *d += f(i, g[i]);
    }
}

/// First-order optimizers over a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in grads.iter() {
                    let t = store.get_mut(id);
                    for (w, &gi) in t.data.iter_mut().zip(g) {
                        *w -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() < store.len() {
                    self.m.resize(store.len(), Vec::new());
                    self.v.resize(store.len(), Vec::new());
                }
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for (id, g) in grads.iter() {
                    let t = store.get_mut(id);
                    let (m, v) = (&mut self.m[id], &mut self.v[id]);
                    if m.len() != t.len() {
                        *m = vec![0.0; t.len()];
                        *v = vec![0.0; t.len()];
                    }
                    for i in 0..g.len().min(t.len()) {
                        let gi = g[i];
                        if gi == 0.0 && m[i] == 0.0 {
                            continue;
                        }
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        t.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Worst disagreement found by [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares analytic gradients of `f` against central differences for the
/// listed parameters. The error of one entry is relative to the larger
/// magnitude, or absolute when both are below `1e-7`. At most
/// `max_per_param` entries of each tensor are checked, spread by stride.
pub fn gradient_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    step: f64,
    max_per_param: usize,
    f: impl Fn(&mut Tape, &ParamStore) -> Var,
) -> GradCheck {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let grads = tape.backward(loss);
    let mut report = GradCheck {
        max_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &id in ids {
        let len = store.get(id).len();
        let picks = len.min(max_per_param.max(1));
        for k in 0..picks {
            let i = k * len / picks;
            let orig = store.get(id).data[i];
            let mut eval = |x: f64| {
                store.get_mut(id).data[i] = x;
                let mut t = Tape::new();
                let l = f(&mut t, store);
                t.scalar(l)
            };
            let numeric = (eval(orig + step) - eval(orig - step)) / (2.0 * step);
            store.get_mut(id).data[i] = orig;
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            let scale = analytic.abs().max(numeric.abs());
            let err = if scale < 1e-7 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / scale };
            report.checked += 1;
            if err > report.max_error {
                report.max_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    report
}

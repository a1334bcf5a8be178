//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a tape. Nodes
//! are only ever appended after their inputs, so the tape order is a
//! topological order and [`Graph::backward`] walks it once in reverse.
//!
//! Binary elementwise ops accept equal shapes, or a single-element operand
//! that is broadcast against the other side. No other broadcasting exists;
//! row-wise bias addition has its own op ([`Graph::add_bias`]).

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::{ParamKey, ParamSet};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    MatMul(NodeId, NodeId),
    Binary(Binary, NodeId, NodeId),
    Unary(Unary, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    MeanPool(NodeId, usize),
    Sum(NodeId),
    ConcatCols(NodeId, NodeId),
    EmbedMean(NodeId, Vec<Vec<usize>>),
    GatherRows(NodeId, Vec<Option<usize>>),
    Reshape(NodeId),
    BceWithLogits(NodeId, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single computation graph. Build it, call [`Graph::backward`] once per
/// loss, then drop it.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamKey, Tensor>,
    leaves: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.get(&key)
    }

    /// Gradient of a leaf created with [`Graph::variable`].
    pub fn leaf(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.params.iter()
    }

    /// Looks up a parameter gradient by `layer/index` name, e.g. `"turn_proj/0"`.
    pub fn by_name(&self, params: &ParamSet, name: &str) -> Option<&Tensor> {
        let key = params.key_by_name(name)?;
        self.param(key)
    }

    /// Dense per-layer gradients aligned with `params`; parameters the loss
    /// does not touch get zeros.
    pub fn layered(&self, params: &ParamSet) -> LayerGrads {
        let layers = params
            .layers()
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                layer
                    .tensors
                    .iter()
                    .enumerate()
                    .map(|(t, tensor)| {
                        self.params
                            .get(&ParamKey::new(l, t))
                            .cloned()
                            .unwrap_or_else(|| Tensor::zeros(tensor.shape()))
                    })
                    .collect()
            })
            .collect();
        LayerGrads { layers }
    }
}

/// Gradients laid out exactly like a [`ParamSet`]: one list of tensors per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub layers: Vec<Vec<Tensor>>,
}

impl LayerGrads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            layers: params
                .layers()
                .iter()
                .map(|l| l.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect())
                .collect(),
        }
    }

    pub fn layer(&self, idx: usize) -> Option<&[Tensor]> {
        self.layers.get(idx).map(Vec::as_slice)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A free variable whose gradient is reported through [`Gradients::leaf`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf bound to a named model parameter.
    pub fn param(&mut self, key: ParamKey, value: Tensor) -> NodeId {
        self.push(value, Op::Param(key), true)
    }

    /// Binds every tensor in `params`; returns node ids laid out per layer.
    pub fn bind(&mut self, params: &ParamSet) -> Vec<Vec<NodeId>> {
        params
            .layers()
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                layer
                    .tensors
                    .iter()
                    .enumerate()
                    .map(|(t, tensor)| self.param(ParamKey::new(l, t), tensor.clone()))
                    .collect()
            })
            .collect()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.is_scalar() {
            let y = bv.data()[0];
            av.map(|x| f(x, y))
        } else if av.is_scalar() {
            let x = av.data()[0];
            bv.map(|y| f(x, y))
        } else {
            return Err(shape_err("elementwise", av.shape(), bv.shape()));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: NodeId) -> NodeId {
        let value = match kind {
            Unary::Sigmoid => self.value(x).map(sigmoid),
            Unary::Tanh => self.value(x).map(f64::tanh),
            Unary::Relu => self.value(x).map(|v| v.max(0.0)),
        };
        let rg = self.rg(x);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Relu, x)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// `x[m×n] + b[n]`, the bias added to every row.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (m, n) = xv.dims2()?;
        if bv.shape() != [n] {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddBias(x, b), rg))
    }

    /// `x·w + b` for `x[m×k]`, `w[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Mean of a matrix along `axis` (0: over rows, giving `[cols]`;
    /// 1: over columns, giving `[rows]`).
    pub fn mean_pool(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = match xv.shape() {
            [m, n] => (*m, *n),
            s => {
                return Err(Error::Shape(format!(
                    "mean_pool expects a matrix, got {s:?}"
                )))
            }
        };
        let data = match axis {
            0 => {
                if m == 0 {
                    return Err(Error::EmptyPool);
                }
                let mut out = vec![0.0; n];
                for row in xv.data().chunks(n) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= m as f64);
                out
            }
            1 => {
                if n == 0 {
                    return Err(Error::EmptyPool);
                }
                xv.data()
                    .chunks(n)
                    .map(|row| row.iter().sum::<f64>() / n as f64)
                    .collect()
            }
            a => return Err(Error::Shape(format!("mean_pool axis {a} out of range"))),
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(data), Op::MeanPool(x, axis), rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, p) = av.dims2()?;
        let (m2, q) = bv.dims2()?;
        if m != m2 {
            return Err(shape_err("concat_cols", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&av.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&bv.data()[i * q..(i + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, p + q], data)?, Op::ConcatCols(a, b), rg))
    }

    /// Row `i` of the result is the mean of the `table` rows listed in
    /// `segments[i]`; an empty segment yields a zero row.
    pub fn embed_mean(&mut self, table: NodeId, segments: Vec<Vec<usize>>) -> Result<NodeId> {
        let tv = self.value(table);
        let (v, d) = tv.dims2()?;
        if segments.is_empty() {
            return Err(Error::Shape("embed_mean needs at least one segment".into()));
        }
        let mut out = vec![0.0; segments.len() * d];
        for (seg, row) in segments.iter().zip(out.chunks_mut(d)) {
            for &id in seg {
                if id >= v {
                    return Err(Error::Shape(format!(
                        "token id {id} outside table of {v} rows"
                    )));
                }
                for (o, &e) in row.iter_mut().zip(&tv.data()[id * d..(id + 1) * d]) {
                    *o += e;
                }
            }
            if !seg.is_empty() {
                let inv = 1.0 / seg.len() as f64;
                row.iter_mut().for_each(|o| *o *= inv);
            }
        }
        let value = Tensor::new(vec![segments.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::EmbedMean(table, segments), rg))
    }

    /// Selects rows of `x`; `None` produces a zero row.
    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<Option<usize>>) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, d) = xv.dims2()?;
        if rows.is_empty() {
            return Err(Error::Shape("gather_rows needs at least one row".into()));
        }
        let mut out = vec![0.0; rows.len() * d];
        for (r, dst) in rows.iter().zip(out.chunks_mut(d)) {
            if let Some(i) = *r {
                if i >= m {
                    return Err(Error::Shape(format!("row {i} outside matrix of {m} rows")));
                }
                dst.copy_from_slice(&xv.data()[i * d..(i + 1) * d]);
            }
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows(x, rows), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Mean binary cross-entropy computed from logits:
    /// `max(x,0) - x·y + log(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(shape_err("bce_with_logits", lv.shape(), targets.shape()));
        }
        if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Domain("bce targets must be 0 or 1".into()));
        }
        let n = lv.len() as f64;
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + softplus(-x.abs()))
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits(logits, targets.data().to_vec()),
            rg,
        ))
    }

    /// Backpropagates from a scalar `loss`. Gradients are accumulated into a
    /// fresh buffer on every call, so nothing leaks between calls.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(NodeId(idx), g);
                }
                Op::Param(key) => {
                    out.params
                        .entry(*key)
                        .and_modify(|acc| acc.add_assign(&g))
                        .or_insert(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2()?;
                    let (_, n) = bv.dims2()?;
                    if self.rg(*a) {
                        let ga = slot(&mut grads, *a, av.shape());
                        matmul_bt_acc(g.data(), bv.data(), ga.data_mut(), m, k, n);
                    }
                    if self.rg(*b) {
                        let gb = slot(&mut grads, *b, bv.shape());
                        matmul_at_acc(av.data(), g.data(), gb.data_mut(), m, k, n);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                        Binary::Add => (g.data().to_vec(), g.data().to_vec()),
                        Binary::Sub => (g.data().to_vec(), g.data().iter().map(|x| -x).collect()),
                        Binary::Mul => {
                            let other_b = broadcast(bv, g.len());
                            let other_a = broadcast(av, g.len());
                            (
                                g.data().iter().zip(&other_b).map(|(x, y)| x * y).collect(),
                                g.data().iter().zip(&other_a).map(|(x, y)| x * y).collect(),
                            )
                        }
                    };
                    if self.rg(*a) {
                        accumulate_reduced(&mut grads, *a, av.shape(), &da);
                    }
                    if self.rg(*b) {
                        accumulate_reduced(&mut grads, *b, bv.shape(), &db);
                    }
                }
                Op::Unary(kind, x) => {
                    let y = &node.value;
                    let local: Vec<f64> = match kind {
                        Unary::Sigmoid => y.data().iter().map(|s| s * (1.0 - s)).collect(),
                        Unary::Tanh => y.data().iter().map(|t| 1.0 - t * t).collect(),
                        Unary::Relu => self
                            .value(*x)
                            .data()
                            .iter()
                            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                            .collect(),
                    };
                    let gx = slot(&mut grads, *x, y.shape());
                    for ((o, gi), l) in gx.data_mut().iter_mut().zip(g.data()).zip(&local) {
                        *o += gi * l;
                    }
                }
                Op::Scale(x, c) => {
                    let gx = slot(&mut grads, *x, g.shape());
                    for (o, gi) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += gi * c;
                    }
                }
                Op::AddBias(x, b) => {
                    let (m, n) = g.dims2()?;
                    if self.rg(*x) {
                        slot(&mut grads, *x, g.shape()).add_assign(&g);
                    }
                    if self.rg(*b) {
                        let gb = slot(&mut grads, *b, &[n]);
                        for i in 0..m {
                            for (o, gi) in
                                gb.data_mut().iter_mut().zip(&g.data()[i * n..(i + 1) * n])
                            {
                                *o += gi;
                            }
                        }
                    }
                }
                Op::MeanPool(x, axis) => {
                    let (m, n) = self.value(*x).dims2()?;
                    let gx = slot(&mut grads, *x, &[m, n]);
                    let d = gx.data_mut();
                    if *axis == 0 {
                        let inv = 1.0 / m as f64;
                        for i in 0..m {
                            for j in 0..n {
                                d[i * n + j] += g.data()[j] * inv;
                            }
                        }
                    } else {
                        let inv = 1.0 / n as f64;
                        for i in 0..m {
                            for j in 0..n {
                                d[i * n + j] += g.data()[i] * inv;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let gs = g.data()[0];
                    let shape = self.value(*x).shape().to_vec();
                    slot(&mut grads, *x, &shape)
                        .data_mut()
                        .iter_mut()
                        .for_each(|o| *o += gs);
                }
                Op::ConcatCols(a, b) => {
                    let (m, p) = self.value(*a).dims2()?;
                    let (_, q) = self.value(*b).dims2()?;
                    let w = p + q;
                    if self.rg(*a) {
                        let ga = slot(&mut grads, *a, &[m, p]);
                        for i in 0..m {
                            for (o, gi) in ga.data_mut()[i * p..(i + 1) * p]
                                .iter_mut()
                                .zip(&g.data()[i * w..i * w + p])
                            {
                                *o += gi;
                            }
                        }
                    }
                    if self.rg(*b) {
                        let gb = slot(&mut grads, *b, &[m, q]);
                        for i in 0..m {
                            for (o, gi) in gb.data_mut()[i * q..(i + 1) * q]
                                .iter_mut()
                                .zip(&g.data()[i * w + p..(i + 1) * w])
                            {
                                *o += gi;
                            }
                        }
                    }
                }
                Op::EmbedMean(table, segments) => {
                    let shape = self.value(*table).shape().to_vec();
                    let d = shape[1];
                    let gt = slot(&mut grads, *table, &shape);
                    for (seg, grow) in segments.iter().zip(g.data().chunks(d)) {
                        if seg.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / seg.len() as f64;
                        for &id in seg {
                            for (o, gi) in gt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(grow)
                            {
                                *o += gi * inv;
                            }
                        }
                    }
                }
                Op::GatherRows(x, rows) => {
                    let shape = self.value(*x).shape().to_vec();
                    let d = shape[1];
                    let gx = slot(&mut grads, *x, &shape);
                    for (r, grow) in rows.iter().zip(g.data().chunks(d)) {
                        if let Some(i) = *r {
                            for (o, gi) in gx.data_mut()[i * d..(i + 1) * d].iter_mut().zip(grow) {
                                *o += gi;
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let gx = slot(&mut grads, *x, &shape);
                    for (o, gi) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                }
                Op::BceWithLogits(logits, targets) => {
                    let lv = self.value(*logits);
                    let n = lv.len() as f64;
                    let gs = g.data()[0];
                    let shape = lv.shape().to_vec();
                    let local: Vec<f64> = lv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&x, &y)| (sigmoid(x) - y) / n * gs)
                        .collect();
                    let gl = slot(&mut grads, *logits, &shape);
                    for (o, l) in gl.data_mut().iter_mut().zip(&local) {
                        *o += l;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'a mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn broadcast(t: &Tensor, n: usize) -> Vec<f64> {
    if t.len() == n {
        t.data().to_vec()
    } else {
        vec![t.data()[0]; n]
    }
}

/// Adds `upstream` into the gradient slot of `id`, summing it down to a
/// scalar when `id` was the broadcast side.
fn accumulate_reduced(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], upstream: &[f64]) {
    let dst = slot(grads, id, shape);
    if dst.len() == upstream.len() {
        for (o, u) in dst.data_mut().iter_mut().zip(upstream) {
            *o += u;
        }
    } else {
        dst.data_mut()[0] += upstream.iter().sum::<f64>();
    }
}

/// One compared coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub key: ParamKey,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CoordinateCheck {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }

    pub fn absolute_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }
}

/// Result of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradCheck {
    /// The coordinate with the largest relative error.
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.relative_error().total_cmp(&b.relative_error()))
    }

    /// Largest relative error among coordinates whose analytic or numeric
    /// gradient reaches `min_magnitude`.
    pub fn max_relative_error_above(&self, min_magnitude: f64) -> f64 {
        self.coordinates
            .iter()
            .filter(|c| c.analytic.abs().max(c.numeric.abs()) >= min_magnitude)
            .map(CoordinateCheck::relative_error)
            .fold(0.0, f64::max)
    }

    /// Largest absolute error among coordinates below `min_magnitude`.
    pub fn max_absolute_error_below(&self, min_magnitude: f64) -> f64 {
        self.coordinates
            .iter()
            .filter(|c| c.analytic.abs().max(c.numeric.abs()) < min_magnitude)
            .map(CoordinateCheck::absolute_error)
            .fold(0.0, f64::max)
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `f` against central differences with
/// step `eps` over every parameter coordinate.
///
/// `f` must be deterministic for fixed parameters; a loss that draws from an
/// unseeded RNG makes the numeric side meaningless.
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    let coords: Vec<(ParamKey, usize)> = all_coordinates(params);
    Ok(grad_check_coords(&f, params, eps, &coords)?.max_relative_error)
}

/// Same as [`grad_check`] but only on the given `(parameter, flat index)`
/// coordinates. Used when a full sweep over every weight is too slow.
pub fn grad_check_coords<F>(
    f: &F,
    params: &ParamSet,
    eps: f64,
    coords: &[(ParamKey, usize)],
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let grads = g.backward(loss)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, p)?;
        Ok(g.value(l).data()[0])
    };

    let mut worst = 0.0f64;
    let mut checked = Vec::with_capacity(coords.len());
    let mut work = params.clone();
    for &(key, i) in coords {
        let analytic = grads.param(key).map_or(0.0, |t| t.data()[i]);
        let orig = params.tensor(key).data()[i];
        work.tensor_mut(key).data_mut()[i] = orig + eps;
        let plus = eval(&work)?;
        work.tensor_mut(key).data_mut()[i] = orig - eps;
        let minus = eval(&work)?;
        work.tensor_mut(key).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic, numeric));
        checked.push(CoordinateCheck {
            key,
            index: i,
            analytic,
            numeric,
        });
    }
    Ok(GradCheck {
        max_relative_error: worst,
        coordinates_checked: coords.len(),
        coordinates: checked,
    })
}

pub fn all_coordinates(params: &ParamSet) -> Vec<(ParamKey, usize)> {
    params
        .keys()
        .flat_map(|key| (0..params.tensor(key).len()).map(move |i| (key, i)))
        .collect()
}

//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! Values enter the tape either as trainable leaves ([`Tape::leaf`]) or as
//! constants ([`Tape::constant`]); constants never receive gradients, which
//! is how frozen base weights and gradient-stopped states are expressed.
//! [`Tape::backward`] replays the record in reverse creation order, so each
//! node is visited exactly once.
//!
//! The tape is meant to be rebuilt for every forward pass and is not `Sync`:
//! one training context owns it.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{is_suffix, MatmulPlan, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(NodeId, NodeId, MatmulPlan),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Softmax(NodeId),
    LayerNorm(NodeId, f64),
    Gelu(NodeId),
    Tanh(NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    MeanAxis(NodeId, usize),
    Narrow { input: NodeId, axis: usize, start: usize },
    Sum(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    MinMaxNorm(NodeId, f64),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of the primitive operations of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held by node values; an estimate of the pass's peak footprint
    /// since the tape retains every intermediate until it is dropped.
    pub fn value_bytes(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .map(|n| n.value.numel() * std::mem::size_of::<f64>())
            .sum()
    }

    /// Registers a trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, true)
    }

    /// Registers a constant. It takes part in the forward computation but
    /// no gradient is ever produced for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.constant_arc(Arc::new(value))
    }

    pub fn constant_arc(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    /// Embedding lookup: rows of `table` (`[vocab, d]`) selected by `ids`,
    /// arranged as `lead_shape × d`.
    pub fn gather<'t>(&'t self, table: Var<'t>, ids: &[usize], lead_shape: &[usize]) -> Result<Var<'t>> {
        let tv = table.value();
        if tv.ndim() != 2 {
            return Err(Error::Contract(format!("gather table must be 2-D, got {:?}", tv.shape())));
        }
        if lead_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("gather", lead_shape, &[ids.len()]));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Input(format!("token id {id} out of range for vocab {vocab}")));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = lead_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Gather { table: table.id, ids: ids.to_vec() }, &[table.id]))
    }

    fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_op(&self, value: Tensor, op: Op, inputs: &[NodeId]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(Arc::new(value), op, requires_grad)
    }

    fn value_of(&self, id: NodeId) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let rg = |i: NodeId| nodes[i].requires_grad;
            let val = |i: NodeId| &nodes[i].value;
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::MatMul(a, b, plan) => {
                    if rg(*a) {
                        let d = plan.grad_lhs(g.data(), val(*b).data());
                        accumulate(&mut grads, *a, Tensor::new(val(*a).shape(), d)?);
                    }
                    if rg(*b) {
                        let d = plan.grad_rhs(val(*a).data(), g.data());
                        accumulate(&mut grads, *b, Tensor::new(val(*b).shape(), d)?);
                    }
                }
                Op::Add(a, b) => {
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.reduce_to(val(*b).shape()));
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.reduce_to(val(*b).shape()).scale(-1.0));
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if rg(*a) {
                        let nb = bv.numel();
                        let d = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| gi * bv.data()[i % nb])
                            .collect();
                        accumulate(&mut grads, *a, Tensor::new(av.shape(), d)?);
                    }
                    if rg(*b) {
                        let prod = g.data().iter().zip(av.data()).map(|(gi, ai)| gi * ai).collect();
                        let full = Tensor::new(g.shape(), prod)?;
                        accumulate(&mut grads, *b, full.reduce_to(bv.shape()));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::Reshape(a) => accumulate(&mut grads, *a, g.reshape(val(*a).shape())?),
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    accumulate(&mut grads, *a, g.permute(&inv)?);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = y.last_dim();
                    let mut d = vec![0.0; y.numel()];
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((o, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = y * (g - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(y.shape(), d)?);
                }
                Op::LayerNorm(a, eps) => {
                    let x = val(*a);
                    let n = x.last_dim();
                    let mut d = vec![0.0; x.numel()];
                    for ((dr, xr), gr) in d.chunks_mut(n).zip(x.data().chunks(n)).zip(g.data().chunks(n)) {
                        let (mean, inv) = row_moments(xr, *eps);
                        let gm = gr.iter().sum::<f64>() / n as f64;
                        let gy = gr
                            .iter()
                            .zip(xr)
                            .map(|(g, x)| g * (x - mean) * inv)
                            .sum::<f64>()
                            / n as f64;
                        for ((o, g), x) in dr.iter_mut().zip(gr).zip(xr) {
                            *o = inv * (g - gm - (x - mean) * inv * gy);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(x.shape(), d)?);
                }
                Op::Gelu(a) => {
                    let x = val(*a);
                    let d = x.data().iter().zip(g.data()).map(|(&x, g)| g * gelu_grad(x)).collect();
                    accumulate(&mut grads, *a, Tensor::new(x.shape(), d)?);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = y.data().iter().zip(g.data()).map(|(y, g)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *a, Tensor::new(y.shape(), d)?);
                }
                Op::Gather { table, ids } => {
                    if rg(*table) {
                        let tv = val(*table);
                        let d = tv.shape()[1];
                        let mut out = Tensor::zeros(tv.shape());
                        for (row, &id) in g.data().chunks(d).zip(ids) {
                            for (o, v) in out.data_mut()[id * d..(id + 1) * d].iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *table, out);
                    }
                }
                Op::MeanAxis(a, axis) => {
                    let x = val(*a);
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let mut d = vec![0.0; x.numel()];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                d[(o * len + l) * inner + i] = g.data()[o * inner + i] / len as f64;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(x.shape(), d)?);
                }
                Op::Narrow { input, axis, start } => {
                    let x = val(*input);
                    let (outer, full, inner) = split_axis(x.shape(), *axis);
                    let len = g.shape()[*axis];
                    let mut d = vec![0.0; x.numel()];
                    for o in 0..outer {
                        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                        let dst = (o * full + start) * inner;
                        d[dst..dst + len * inner].copy_from_slice(src);
                    }
                    accumulate(&mut grads, *input, Tensor::new(x.shape(), d)?);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(val(*a).shape(), gv));
                }
                Op::CrossEntropy { logits, labels } => {
                    let x = val(*logits);
                    let c = x.last_dim();
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut d = vec![0.0; x.numel()];
                    for ((dr, xr), &label) in d.chunks_mut(c).zip(x.data().chunks(c)).zip(labels) {
                        softmax_row(xr, dr);
                        dr[label] -= 1.0;
                        for v in dr.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(x.shape(), d)?);
                }
                Op::MinMaxNorm(a, eps) => {
                    let x = val(*a);
                    let n = x.last_dim();
                    let mut d = vec![0.0; x.numel()];
                    for ((dr, xr), gr) in d.chunks_mut(n).zip(x.data().chunks(n)).zip(g.data().chunks(n)) {
                        minmax_row_grad(xr, gr, *eps, dr);
                    }
                    accumulate(&mut grads, *a, Tensor::new(x.shape(), d)?);
                }
            }
        }

        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        // Keep only leaf gradients; intermediates were consumed above.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Gradients of trainable leaves after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a trainable leaf; `None` for constants and intermediates.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros of the right shape for
    /// anything that received no gradient.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

/// Identity on values, constant to the tape: nothing upstream of the
/// result receives gradient through it.
pub fn stop_gradient<'t>(x: Var<'t>) -> Var<'t> {
    x.tape.constant_arc(x.value())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push_op(value, op, &[self.id])
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push_op(value, op, &[self.id, other.id])
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let plan = MatmulPlan::new(a.shape(), b.shape())?;
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        plan.forward(a.data(), b.data(), &mut out);
        let value = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id, plan)))
    }

    fn broadcast(&self, other: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if !is_suffix(a.shape(), b.shape()) {
            return Err(Error::dim(op, a.shape(), b.shape()));
        }
        let nb = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % nb]))
            .collect();
        Tensor::new(a.shape(), data)
    }

    /// Elementwise sum; `other` may be a trailing-suffix broadcast (e.g. a bias).
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.broadcast(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.broadcast(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.broadcast(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let v = self.value().permute(axes)?;
        Ok(self.unary(v, Op::Permute(self.id, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t>> {
        let nd = self.value().ndim();
        if nd < 2 {
            return Err(Error::dim("transpose", &self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let x = self.value();
        let n = x.last_dim();
        let mut out = vec![0.0; x.numel()];
        for (o, r) in out.chunks_mut(n).zip(x.data().chunks(n)) {
            softmax_row(r, o);
        }
        let v = Tensor::new(x.shape(), out).expect("same shape");
        self.unary(v, Op::Softmax(self.id))
    }

    /// Standardization over the last axis (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let x = self.value();
        let n = x.last_dim();
        let mut out = vec![0.0; x.numel()];
        for (o, r) in out.chunks_mut(n).zip(x.data().chunks(n)) {
            let (mean, inv) = row_moments(r, eps);
            for (o, x) in o.iter_mut().zip(r) {
                *o = (x - mean) * inv;
            }
        }
        let v = Tensor::new(x.shape(), out).expect("same shape");
        self.unary(v, Op::LayerNorm(self.id, eps))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(Error::dim("mean_axis", x.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * len + l) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary(Tensor::new(shape, out)?, Op::MeanAxis(self.id, axis)))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() || start + len > x.shape()[axis] {
            return Err(Error::dim("narrow", x.shape(), &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[src..src + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(Tensor::new(shape, out)?, Op::Narrow { input: self.id, axis, start }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `self` (`[n, classes]`).
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::dim("cross_entropy", x.shape(), &[labels.len()]));
        }
        let c = x.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        let mut total = 0.0;
        for (r, &label) in x.data().chunks(c).zip(labels) {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - r[label];
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        Ok(self.unary(
            v,
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Min-max rescaling over the last axis: `(x - min) / (max - min + eps)`.
    pub fn minmax_normalize(&self, eps: f64) -> Result<Var<'t>> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("normalization epsilon must be positive, got {eps}")));
        }
        let x = self.value();
        if !x.is_finite() {
            return Err(Error::Numeric("non-finite value entering state normalization".into()));
        }
        let n = x.last_dim();
        let mut out = vec![0.0; x.numel()];
        for (o, r) in out.chunks_mut(n).zip(x.data().chunks(n)) {
            minmax_row(r, eps, o);
        }
        Ok(self.unary(Tensor::new(x.shape(), out)?, Op::MinMaxNorm(self.id, eps)))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn row_moments(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// First index of the minimum and maximum; ties resolve to the lowest index.
fn arg_extrema(x: &[f64]) -> (usize, usize) {
    let (mut lo, mut hi) = (0, 0);
    for (i, &v) in x.iter().enumerate() {
        if v < x[lo] {
            lo = i;
        }
        if v > x[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

pub(crate) fn minmax_row(x: &[f64], eps: f64, out: &mut [f64]) {
    let (lo, hi) = arg_extrema(x);
    let (min, max) = (x[lo], x[hi]);
    let denom = max - min + eps;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - min) / denom;
    }
}

fn minmax_row_grad(x: &[f64], g: &[f64], eps: f64, out: &mut [f64]) {
    let (lo, hi) = arg_extrema(x);
    let (min, max) = (x[lo], x[hi]);
    let denom = max - min + eps;
    let g_sum: f64 = g.iter().sum();
    // sum_i g_i * (x_i - min) / denom^2
    let g_num: f64 = g.iter().zip(x).map(|(g, v)| g * (v - min)).sum::<f64>() / (denom * denom);
    for (o, gi) in out.iter_mut().zip(g) {
        *o = gi / denom;
    }
    out[lo] += -g_sum / denom + g_num;
    out[hi] -= g_num;
}

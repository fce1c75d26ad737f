//! Reverse-mode automatic differentiation over an append-only node arena.
//!
//! A [`Graph`] records every operation as a node whose parents have smaller
//! indices, so the arena order is already a topological order and backward is
//! a single reverse sweep. Parameters enter the graph through
//! [`Graph::param`], which shares the value buffer with the
//! [`ParameterStore`] instead of copying it.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParameterStore};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Sigmoid,
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Elementwise, Var, Var),
    Unary(Elementwise, Var),
    Log(Var),
    Affine { x: Var, scale: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    SoftmaxOffDiagonal(Var),
    Concat { parts: Vec<Var>, axis: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    BroadcastRows(Var),
    Gather { x: Var, ids: Vec<usize> },
    Sum(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    backward_done: bool,
}

/// Lanes of a softmax: `(count, length, stride, base_of(lane))`.
fn softmax_lanes(shape: &[usize], axis: usize) -> Result<(usize, usize, usize, usize)> {
    match (shape, axis) {
        ([n], 0) => Ok((1, *n, 1, 0)),
        ([r, c], 1) => Ok((*r, *c, 1, *c)),
        ([r, c], 0) => Ok((*c, *r, *c, 1)),
        _ => Err(Error::shape("softmax", shape, &[axis])),
    }
}

fn lane_base(lane: usize, step: usize) -> usize {
    lane * step
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Result<Var> {
        if self.backward_done {
            return Err(Error::invalid("graph is frozen after backward()"));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant leaf: no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false).expect("constant on frozen graph")
    }

    /// A free leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true).expect("variable on frozen graph")
    }

    /// Leaf bound to a named parameter. Repeated lookups return the same node.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        let v = self.push_arc(Arc::clone(&p.value), Op::Leaf, p.trainable)?;
        self.param_index.insert(name.to_string(), v);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Elementwise operation. Binary operations need equal shapes, except
    /// that either side may be a single-element tensor.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => {
                let f: fn(f64) -> f64 = match op {
                    Elementwise::Relu => |v| v.max(0.0),
                    Elementwise::Tanh => f64::tanh,
                    Elementwise::Sigmoid => sigmoid,
                    _ => unreachable!(),
                };
                let out = self.value(a).map(f);
                let rg = self.rg(&[a]);
                self.push(out, Op::Unary(op, a), rg)
            }
            _ => Err(Error::invalid(format!("{op:?}: wrong operand count"))),
        }
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f: fn(f64, f64) -> f64 = match op {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
            _ => unreachable!(),
        };
        let out = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.is_scalar() {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::shape("elementwise", ta.shape(), tb.shape()));
        };
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Binary(op, a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Relu, a, None)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Tanh, a, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sigmoid, a, None)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("log of non-positive value".into()));
        }
        let out = t.map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(out, Op::Log(a), rg)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// Max-subtracted softmax along `axis` (rank 1: axis 0; rank 2: 0 or 1).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (lanes, len, stride, step) = softmax_lanes(t.shape(), axis)?;
        if len == 0 {
            return Err(Error::invalid("softmax over an empty axis"));
        }
        let mut out = t.clone();
        let data = out.data_mut();
        for lane in 0..lanes {
            let base = lane_base(lane, step);
            let idx = |k: usize| base + k * stride;
            let max = (0..len).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (data[idx(k)] - max).exp();
                data[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                data[idx(k)] /= total;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x, axis }, rg)
    }

    /// Row-wise softmax of a square matrix that ignores the diagonal.
    /// Diagonal outputs are zero; a 1×1 input yields `[[0]]`.
    pub fn softmax_off_diagonal(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if t.rank() != 2 || r != c {
            return Err(Error::shape("softmax_off_diagonal", t.shape(), &[]));
        }
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = t.row(i);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..c).filter(|&j| j != i) {
                let e = (row[j] - max).exp();
                out.data_mut()[i * c + j] = e;
                total += e;
            }
            if total > 0.0 {
                for v in &mut out.data_mut()[i * c..(i + 1) * c] {
                    *v /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxOffDiagonal(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat(&tensors, axis)?;
        let rg = self.rg(parts);
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Column-wise maximum of an `[n×d]` matrix, giving `[d]`. Ties resolve to
    /// the first maximal row.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2();
        if t.rank() != 2 || n == 0 {
            return Err(Error::invalid(format!("max_pool needs n ≥ 1 rows, got {:?}", t.shape())));
        }
        let mut argmax = vec![0usize; d];
        let mut out = t.row(0).to_vec();
        for r in 1..n {
            for (c, v) in t.row(r).iter().enumerate() {
                if *v > out[c] {
                    out[c] = *v;
                    argmax[c] = r;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::vector(out), Op::MaxPool { x, argmax }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if t.rank() != 2 || start > end || end > r {
            return Err(Error::shape("slice_rows", t.shape(), &[start, end]));
        }
        let out = Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceRows { x, start }, rg)
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.slice_rows(x, r, r + 1)
    }

    /// Repeats a single row `[1×d]` (or `[d]`) `n` times into `[n×d]`.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != 1 || t.rank() > 2 {
            return Err(Error::shape("broadcast_rows", t.shape(), &[n]));
        }
        let d = t.cols();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, d], data)?, Op::BroadcastRows(x), rg)
    }

    /// Row lookup: `out[k] = x[ids[k]]`.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", t.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![ids.len(), c], data)?,
            Op::Gather {
                x,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates gradients from a single-element `loss` to every node that
    /// requires them. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid("backward() already ran on this graph"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let shape = self.shape(loss).to_vec();
        self.grads[loss.0] = Some(Tensor::full(&shape, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&mut self, i: usize, g: &Tensor) {
        // Parents always have smaller indices than `i`.
        let out = Arc::clone(&self.nodes[i].value);
        let val = |graph: &Graph, v: Var| Arc::clone(&graph.nodes[v.0].value);
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(self, a), val(self, b));
                if self.nodes[a.0].requires_grad {
                    let ga = g.matmul_nt(&tb).expect("matmul backward");
                    self.accumulate(a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    // Weights are reused across steps; add in place when possible.
                    match &mut self.grads[b.0] {
                        Some(existing) => ta.matmul_tn_acc(g, existing).expect("matmul backward"),
                        slot @ None => *slot = Some(ta.matmul_tn(g).expect("matmul backward")),
                    }
                }
            }
            &Op::Transpose(a) => self.accumulate(a, g.transpose()),
            &Op::Binary(op, a, b) => {
                let (ta, tb) = (val(self, a), val(self, b));
                let (da, db) = match op {
                    Elementwise::Add => (g.clone(), g.clone()),
                    Elementwise::Sub => (g.clone(), g.map(|v| -v)),
                    Elementwise::Mul => {
                        let da = if tb.is_scalar() && ta.shape() != tb.shape() {
                            g.map(|v| v * tb.item())
                        } else {
                            g.zip_map(&broadcast_like(&tb, g), |x, y| x * y)
                        };
                        let db = if ta.is_scalar() && ta.shape() != tb.shape() {
                            g.map(|v| v * ta.item())
                        } else {
                            g.zip_map(&broadcast_like(&ta, g), |x, y| x * y)
                        };
                        (da, db)
                    }
                    _ => unreachable!(),
                };
                self.accumulate(a, reduce_to(&ta, da));
                self.accumulate(b, reduce_to(&tb, db));
            }
            &Op::Unary(op, a) => {
                let ta = val(self, a);
                let d = match op {
                    Elementwise::Relu => g.zip_map(&ta, |gv, x| if x > 0.0 { gv } else { 0.0 }),
                    Elementwise::Tanh => g.zip_map(&out, |gv, y| gv * (1.0 - y * y)),
                    Elementwise::Sigmoid => g.zip_map(&out, |gv, y| gv * y * (1.0 - y)),
                    _ => unreachable!(),
                };
                self.accumulate(a, d);
            }
            &Op::Log(a) => {
                let ta = val(self, a);
                self.accumulate(a, g.zip_map(&ta, |gv, x| gv / x));
            }
            &Op::Affine { x, scale } => self.accumulate(x, g.map(|v| v * scale)),
            &Op::Clamp { x, lo, hi } => {
                let tx = val(self, x);
                let d = g.zip_map(&tx, |gv, v| if v < lo || v > hi { 0.0 } else { gv });
                self.accumulate(x, d);
            }
            &Op::Softmax { x, axis } => {
                let (lanes, len, stride, step) =
                    softmax_lanes(out.shape(), axis).expect("validated in forward");
                let mut d = Tensor::zeros(out.shape());
                for lane in 0..lanes {
                    let base = lane_base(lane, step);
                    let dot: f64 = (0..len)
                        .map(|k| g.data()[base + k * stride] * out.data()[base + k * stride])
                        .sum();
                    for k in 0..len {
                        let j = base + k * stride;
                        d.data_mut()[j] = out.data()[j] * (g.data()[j] - dot);
                    }
                }
                self.accumulate(x, d);
            }
            &Op::SoftmaxOffDiagonal(x) => {
                let n = out.rows();
                let mut d = Tensor::zeros(out.shape());
                for r in 0..n {
                    let yr = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = (0..n).filter(|&j| j != r).map(|j| gr[j] * yr[j]).sum();
                    for j in (0..n).filter(|&j| j != r) {
                        d.data_mut()[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(x, d);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let sizes: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis]).collect();
                let pieces = tensor::split(g, axis, &sizes).expect("concat backward");
                for (p, piece) in parts.into_iter().zip(pieces) {
                    self.accumulate(p, piece);
                }
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                let (n, d) = self.value(x).dims2();
                let mut gx = Tensor::zeros(&[n, d]);
                for (c, &r) in argmax.iter().enumerate() {
                    gx.data_mut()[r * d + c] += g.data()[c];
                }
                self.accumulate(x, gx);
            }
            &Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                self.accumulate(x, g.reshape(&shape).expect("reshape backward"));
            }
            &Op::SliceRows { x, start } => {
                let shape = self.shape(x).to_vec();
                let c = shape[1];
                let mut gx = Tensor::zeros(&shape);
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(x, gx);
            }
            &Op::BroadcastRows(x) => {
                let shape = self.shape(x).to_vec();
                let d = g.cols();
                let mut acc = vec![0.0; d];
                for r in 0..g.rows() {
                    for (a, v) in acc.iter_mut().zip(g.row(r)) {
                        *a += v;
                    }
                }
                self.accumulate(x, Tensor::new(shape, acc).expect("broadcast backward"));
            }
            Op::Gather { x, ids } => {
                let x = *x;
                let shape = self.shape(x).to_vec();
                let c = g.cols();
                let mut gx = Tensor::zeros(&shape);
                for (k, &row) in ids.iter().enumerate() {
                    for (a, v) in gx.data_mut()[row * c..(row + 1) * c].iter_mut().zip(g.row(k)) {
                        *a += v;
                    }
                }
                self.accumulate(x, gx);
            }
            &Op::Sum(x) => {
                let shape = self.shape(x).to_vec();
                self.accumulate(x, Tensor::full(&shape, g.item()));
            }
        }
    }

    /// Gradients of every parameter referenced by this graph. Parameters the
    /// loss does not depend on get zeros; frozen ones are left out.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::default();
        for (name, v) in &self.params {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let g = self.grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Expands a scalar operand to `like`'s shape, otherwise returns it as is.
fn broadcast_like(t: &Tensor, like: &Tensor) -> Tensor {
    if t.shape() == like.shape() {
        t.clone()
    } else {
        Tensor::full(like.shape(), t.item())
    }
}

/// Sums a gradient back down to a scalar operand's shape when needed.
fn reduce_to(operand: &Tensor, g: Tensor) -> Tensor {
    if operand.shape() == g.shape() {
        g
    } else {
        Tensor::full(operand.shape(), g.sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::vector(vec![0.0]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 8.0]);
        let c = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
        assert!(g.elementwise(Elementwise::Add, a, None).is_err());
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let s = g.variable(Tensor::scalar(3.0));
        let m = g.mul(a, s).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 6.0]);
        let l = g.sum(m).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(g.grad(s).unwrap().data(), &[3.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0; 3]));
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y).data(), &[1.0 / 3.0; 3], 1e-15));
        let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y).data(), &[0.25, 0.75], 1e-15));
        let e = g.constant(Tensor::vector(vec![]));
        assert!(g.softmax(e, 0).is_err());
    }

    #[test]
    fn softmax_matrix_axes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]));
        let rows = g.softmax(x, 1).unwrap();
        let cols = g.softmax(x, 0).unwrap();
        let r = g.value(rows);
        assert!((r.at(0, 0) + r.at(0, 1) - 1.0).abs() < 1e-15);
        let c = g.value(cols);
        assert!((c.at(0, 1) + c.at(1, 1) - 1.0).abs() < 1e-15);
        assert!((c.at(1, 1) - 1.0 / (1.0 + (-3f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn off_diagonal_softmax_single_entity_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![4.0]]));
        let y = g.softmax_off_diagonal(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
        let x = g.constant(Tensor::from_rows(&[vec![9.0, 1.0], vec![2.0, 9.0]]));
        let y = g.softmax_off_diagonal(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn max_pool_examples_and_tie_rule() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]));
        let p = g.max_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 5.0]);
        let x = g.constant(Tensor::from_rows(&[vec![7.0, 8.0]]));
        let p = g.max_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[7.0, 8.0]);

        let x = g.variable(Tensor::from_rows(&[vec![2.0, 2.0], vec![2.0, 2.0]]));
        let p = g.max_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 2.0]);
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);

        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[0, 2]));
        assert!(g.max_pool(e).is_err());
    }

    #[test]
    fn backward_quadratic() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0]);
        assert!(g.backward(l).is_err(), "second backward must fail");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut store = ParameterStore::new(0);
        store.insert("a", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        store.insert("b", Tensor::vector(vec![5.0]), true).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let _b = g.param(&store, "b").unwrap();
        let l = g.sum(a).unwrap();
        g.backward(l).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads.get("b").unwrap().data(), &[0.0]);
        assert_eq!(grads.get("a").unwrap().data(), &[1.0, 1.0]);
    }
}

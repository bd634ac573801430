use std::cell::{Cell, RefCell};
use std::fmt;

use rand::Rng;

use super::kernels::{self, Broadcast};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Whether a graph records adjoint information.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Record every differentiable operation for a later [`Graph::backward`].
    Record,
    /// Forward values only; nothing requires a gradient.
    Eval,
}

type CustomBackward<F> = Box<dyn Fn(&[F]) -> Vec<Vec<F>>>;

enum Op<F: Real> {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Scale(usize, F),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Powf(usize, F),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    Sum { x: usize, axis: usize },
    Mean { x: usize, axis: usize },
    Max { x: usize, axis: usize, argmax: Vec<usize> },
    SumAll(usize),
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    Squash(usize),
    Custom { inputs: Vec<usize>, backward: CustomBackward<F> },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Option<Op<F>>,
    requires_grad: bool,
}

/// An ordered record of executed primitive operations.
///
/// Node ids increase with creation order, so walking ids downward from the
/// loss is a valid reverse topological order.
pub struct Graph<F: Real = f32> {
    mode: Mode,
    nodes: RefCell<Vec<Node<F>>>,
    grads: RefCell<Vec<Option<Vec<F>>>>,
    track_kinks: Cell<bool>,
    kink_signature: Cell<u64>,
}

/// Handle to a value living in a [`Graph`].
pub struct Var<'g, F: Real = f32> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<F: Real> Clone for Var<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<F: Real> Copy for Var<'_, F> {}

impl<F: Real> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new(Mode::Record)
    }
}

impl<F: Real> Graph<F> {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            track_kinks: Cell::new(false),
            kink_signature: Cell::new(FNV_OFFSET),
        }
    }

    pub fn recording() -> Self {
        Self::new(Mode::Record)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Enables a running hash of every ReLU sign pattern and max-reduction
    /// argmax. Two evaluations with equal signatures lie on the same smooth
    /// piece of a piecewise-smooth function.
    pub fn track_kinks(&self, on: bool) {
        self.track_kinks.set(on);
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_signature.get()
    }

    fn note_kink(&self, v: u64) {
        let h = (self.kink_signature.get() ^ v).wrapping_mul(FNV_PRIME);
        self.kink_signature.set(h);
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        let requires_grad = requires_grad && self.mode == Mode::Record;
        self.push_node(value, None, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    fn push_node(&self, value: Tensor<F>, op: Option<Op<F>>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<F>, inputs: &[usize], op: impl FnOnce() -> Op<F>) -> Var<'_, F> {
        let requires_grad = self.mode == Mode::Record && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let op = requires_grad.then(op);
        self.push_node(value, op, requires_grad)
    }

    fn value(&self, id: usize) -> Tensor<F> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, F>], axis: usize) -> Result<Var<'g, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = first.shape();
        let rank = base.len();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        let values: Vec<Tensor<F>> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let agree = s.len() == rank
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !agree {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis)?;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::from_parts(shape, out), &ids, || Op::Concat {
            parts: ids.clone(),
            axis,
        }))
    }

    /// Rows of a `[V×d]` table selected by `ids`, giving `[n×d]`.
    pub fn gather_rows<'g>(&'g self, table: Var<'g, F>, ids: &[usize]) -> Result<Var<'g, F>> {
        let t = table.value();
        if t.rank() != 2 {
            return Err(Error::contract(format!(
                "gather_rows needs a matrix table, got {:?}",
                t.shape()
            )));
        }
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(Error::Index {
                    what: "embedding row",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(vec![ids.len(), d], out);
        Ok(self.push(value, &[table.id], || Op::GatherRows {
            table: table.id,
            ids: ids.to_vec(),
        }))
    }

    /// A user-defined primitive: `value` is the forward result and `backward`
    /// maps the upstream gradient to one gradient buffer per input.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g, F>],
        value: Tensor<F>,
        backward: impl Fn(&[F]) -> Vec<Vec<F>> + 'static,
    ) -> Var<'g, F> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        self.push(value, &ids, || Op::Custom {
            inputs: ids.clone(),
            backward: Box::new(backward),
        })
    }

    /// Accumulated gradient of `var`, if any has been propagated to it.
    pub fn grad(&self, var: Var<'_, F>) -> Option<Tensor<F>> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        Some(Tensor::from_parts(var.shape(), g.clone()))
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    /// Propagates d(loss)/d(node) to every gradient-requiring ancestor of
    /// `loss`. Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&self, loss: Var<'_, F>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if self.mode != Mode::Record {
            return Err(Error::contract("backward on a graph built in eval mode"));
        }
        if !root.requires_grad {
            return Err(Error::contract(
                "loss does not depend on any gradient-requiring leaf",
            ));
        }
        let mut pending: Vec<Option<Vec<F>>> = vec![None; loss.id + 1];
        pending[loss.id] = Some(vec![F::one()]);
        let mut done: Vec<(usize, Vec<F>)> = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            if let Some(op) = &nodes[id].op {
                backprop(&nodes, id, op, &g, &mut pending);
            }
            done.push((id, g));
        }
        drop(nodes);
        let mut grads = self.grads.borrow_mut();
        let total = self.nodes.borrow().len();
        if grads.len() < total {
            grads.resize(total, None);
        }
        for (id, g) in done {
            match &mut grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn contribute<F: Real>(
    nodes: &[Node<F>],
    pending: &mut [Option<Vec<F>>],
    id: usize,
    fill: impl FnOnce(&mut [F]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.numel();
    let slot = pending[id].get_or_insert_with(|| vec![F::zero(); len]);
    fill(slot);
}

fn backprop<F: Real>(
    nodes: &[Node<F>],
    id: usize,
    op: &Op<F>,
    g: &[F],
    pending: &mut [Option<Vec<F>>],
) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match op {
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) {
                -F::one()
            } else {
                F::one()
            };
            let (_, plan) = Broadcast::plan(val(*a).shape(), val(*b).shape()).expect("planned");
            contribute(nodes, pending, *a, |ga| {
                plan.for_each(g.len(), |o, ia, _| ga[ia] += g[o]);
            });
            contribute(nodes, pending, *b, |gb| {
                plan.for_each(g.len(), |o, _, ib| gb[ib] += sign * g[o]);
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let (_, plan) = Broadcast::plan(val(*a).shape(), val(*b).shape()).expect("planned");
            contribute(nodes, pending, *a, |ga| {
                plan.for_each(g.len(), |o, ia, ib| ga[ia] += g[o] * bv[ib]);
            });
            contribute(nodes, pending, *b, |gb| {
                plan.for_each(g.len(), |o, ia, ib| gb[ib] += g[o] * av[ia]);
            });
        }
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            contribute(nodes, pending, *a, |ga| {
                kernels::matmul_a_bt(g, val(*b).data(), ga, m, k, n);
            });
            contribute(nodes, pending, *b, |gb| {
                kernels::matmul_at_b(val(*a).data(), g, gb, m, k, n);
            });
        }
        Op::Scale(x, k) => contribute(nodes, pending, *x, |gx| {
            gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *k);
        }),
        Op::AddScalar(x) | Op::Reshape(x) => contribute(nodes, pending, *x, |gx| {
            gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }),
        Op::Relu(x) => {
            let xv = val(*x).data();
            contribute(nodes, pending, *x, |gx| {
                for ((a, &b), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    if xi > F::zero() {
                        *a += b;
                    }
                }
            });
        }
        Op::Sigmoid(x) => contribute(nodes, pending, *x, |gx| {
            for ((a, &b), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                *a += b * y * (F::one() - y);
            }
        }),
        Op::Tanh(x) => contribute(nodes, pending, *x, |gx| {
            for ((a, &b), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                *a += b * (F::one() - y * y);
            }
        }),
        Op::Exp(x) => contribute(nodes, pending, *x, |gx| {
            for ((a, &b), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                *a += b * y;
            }
        }),
        Op::Ln(x) => {
            let xv = val(*x).data();
            contribute(nodes, pending, *x, |gx| {
                for ((a, &b), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *a += b / xi;
                }
            });
        }
        Op::Powf(x, p) => {
            let xv = val(*x).data();
            contribute(nodes, pending, *x, |gx| {
                for ((a, &b), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *a += b * *p * xi.powf(*p - F::one());
                }
            });
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = kernels::split_axis(val(*x).shape(), *axis).expect("axis");
            let y = out.data();
            contribute(nodes, pending, *x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: F = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, n, inner) = kernels::split_axis(val(*x).shape(), *axis).expect("axis");
            let y = out.data();
            contribute(nodes, pending, *x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let total: F = (0..n).map(|k| g[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] += g[at(k)] - y[at(k)].exp() * total;
                        }
                    }
                }
            });
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let (outer, n, inner) = kernels::split_axis(val(*x).shape(), *axis).expect("axis");
            let scale = if matches!(op, Op::Mean { .. }) {
                F::one() / F::of(n as f64)
            } else {
                F::one()
            };
            contribute(nodes, pending, *x, |gx| {
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            gx[(o * n + k) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            });
        }
        Op::Max { x, axis, argmax } => {
            let (outer, n, inner) = kernels::split_axis(val(*x).shape(), *axis).expect("axis");
            contribute(nodes, pending, *x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        gx[(o * n + argmax[r]) * inner + i] += g[r];
                    }
                }
            });
        }
        Op::SumAll(x) => contribute(nodes, pending, *x, |gx| {
            gx.iter_mut().for_each(|a| *a += g[0]);
        }),
        Op::Concat { parts, axis } => {
            let shape = out.shape();
            let (outer, total, inner) = kernels::split_axis(shape, *axis).expect("axis");
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                contribute(nodes, pending, p, |gp| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                });
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, n, inner) = kernels::split_axis(val(*x).shape(), *axis).expect("axis");
            let len = out.shape()[*axis];
            contribute(nodes, pending, *x, |gx| {
                for o in 0..outer {
                    let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
            });
        }
        Op::GatherRows { table, ids } => {
            let d = val(*table).shape()[1];
            contribute(nodes, pending, *table, |gt| {
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut gt[i * d..(i + 1) * d];
                    dst.iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
            });
        }
        Op::Squash(x) => {
            let xv = val(*x);
            let d = *xv.shape().last().expect("squash input has rank >= 1");
            contribute(nodes, pending, *x, |gx| {
                for (r, v) in xv.data().chunks(d).enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let n2: F = v.iter().map(|&a| a * a).sum();
                    if n2 == F::zero() {
                        continue;
                    }
                    let norm = n2.sqrt();
                    let denom = F::one() + n2;
                    let s = norm / denom;
                    let ds_over_r = (F::one() - n2) / (denom * denom * norm);
                    let vg: F = v.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..d {
                        gx[r * d + k] += s * gr[k] + ds_over_r * vg * v[k];
                    }
                }
            });
        }
        Op::Custom { inputs, backward } => {
            let gs = backward(g);
            for (&i, gi) in inputs.iter().zip(gs) {
                contribute(nodes, pending, i, |slot| {
                    slot.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b);
                });
            }
        }
    }
}

impl<'g, F: Real> Var<'g, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn value(&self) -> Tensor<F> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    pub fn grad(&self) -> Option<Tensor<F>> {
        self.graph.grad(*self)
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(self) -> Self {
        self.graph.constant(self.value())
    }

    fn binary(
        self,
        other: Self,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: fn(usize, usize) -> Op<F>,
    ) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let (shape, plan) = Broadcast::plan(a.shape(), b.shape()).map_err(|_| Error::Shape {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let numel: usize = shape.iter().product();
        let mut out = vec![F::zero(); numel];
        let (ad, bd) = (a.data(), b.data());
        plan.for_each(numel, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
        let (x, y) = (self.id, other.id);
        Ok(self
            .graph
            .push(Tensor::from_parts(shape, out), &[x, y], || op(x, y)))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        let value = self.value().matmul(&other.value())?;
        let (a, b) = (self.id, other.id);
        Ok(self.graph.push(value, &[a, b], || Op::MatMul(a, b)))
    }

    fn unary(self, f: impl Fn(F) -> F, op: impl FnOnce(usize) -> Op<F>) -> Self {
        let value = self.value().map(f);
        let x = self.id;
        self.graph.push(value, &[x], || op(x))
    }

    pub fn scale(self, k: F) -> Self {
        self.unary(|a| a * k, |x| Op::Scale(x, k))
    }

    pub fn neg(self) -> Self {
        self.scale(-F::one())
    }

    pub fn add_scalar(self, k: F) -> Self {
        self.unary(|a| a + k, Op::AddScalar)
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Self {
        if self.graph.track_kinks.get() {
            for &v in self.value().data() {
                self.graph.note_kink((v > F::zero()) as u64);
            }
        }
        self.unary(|a| a.max(F::zero()), Op::Relu)
    }

    pub fn sigmoid(self) -> Self {
        self.unary(|a| F::one() / (F::one() + (-a).exp()), Op::Sigmoid)
    }

    pub fn tanh(self) -> Self {
        self.unary(|a| a.tanh(), Op::Tanh)
    }

    pub fn exp(self) -> Self {
        self.unary(|a| a.exp(), Op::Exp)
    }

    pub fn ln(self) -> Self {
        self.unary(|a| a.ln(), Op::Ln)
    }

    pub fn powf(self, p: F) -> Self {
        self.unary(|a| a.powf(p), |x| Op::Powf(x, p))
    }

    fn along_axis(
        self,
        axis: usize,
        f: impl Fn(&mut dyn FnMut(usize) -> F, &mut dyn FnMut(usize, F), usize),
    ) -> Result<Tensor<F>> {
        let x = self.value();
        let (outer, n, inner) = kernels::split_axis(x.shape(), axis)?;
        let xd = x.data();
        let mut out = vec![F::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut read = |k: usize| xd[at(k)];
                let mut write = |k: usize, v: F| out[at(k)] = v;
                f(&mut read, &mut write, n);
            }
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), out))
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(self, axis: usize) -> Result<Self> {
        let value = self.along_axis(axis, |read, write, n| {
            let mx = (0..n).map(&mut *read).fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for k in 0..n {
                let e = (read(k) - mx).exp();
                total += e;
                write(k, e);
            }
            for k in 0..n {
                let e = (read(k) - mx).exp();
                write(k, e / total);
            }
        })?;
        let x = self.id;
        Ok(self.graph.push(value, &[x], || Op::Softmax { x, axis }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Self> {
        let value = self.along_axis(axis, |read, write, n| {
            let mx = (0..n).map(&mut *read).fold(F::neg_infinity(), F::max);
            let total: F = (0..n).map(|k| (read(k) - mx).exp()).sum();
            let lse = mx + total.ln();
            for k in 0..n {
                write(k, read(k) - lse);
            }
        })?;
        let x = self.id;
        Ok(self.graph.push(value, &[x], || Op::LogSoftmax { x, axis }))
    }

    fn reduce(
        self,
        axis: usize,
        keepdim: bool,
        init: F,
        step: impl Fn(F, F) -> F,
    ) -> Result<(Tensor<F>, usize)> {
        let x = self.value();
        let (outer, n, inner) = kernels::split_axis(x.shape(), axis)?;
        let xd = x.data();
        let mut out = vec![init; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let r = o * inner + i;
                    out[r] = step(out[r], xd[(o * n + k) * inner + i]);
                }
            }
        }
        let mut shape = x.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok((Tensor::from_parts(shape, out), n))
    }

    pub fn sum(self, axis: usize, keepdim: bool) -> Result<Self> {
        let (value, _) = self.reduce(axis, keepdim, F::zero(), |a, b| a + b)?;
        let x = self.id;
        Ok(self.graph.push(value, &[x], || Op::Sum { x, axis }))
    }

    pub fn mean(self, axis: usize, keepdim: bool) -> Result<Self> {
        let (value, n) = self.reduce(axis, keepdim, F::zero(), |a, b| a + b)?;
        let value = value.map(|v| v / F::of(n as f64));
        let x = self.id;
        Ok(self.graph.push(value, &[x], || Op::Mean { x, axis }))
    }

    /// Maximum along `axis`; the adjoint goes to the first maximal position.
    pub fn max(self, axis: usize, keepdim: bool) -> Result<Self> {
        let x = self.value();
        let (outer, n, inner) = kernels::split_axis(x.shape(), axis)?;
        let xd = x.data();
        let mut out = vec![F::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let r = o * inner + i;
                let mut best = 0;
                for k in 1..n {
                    if xd[(o * n + k) * inner + i] > xd[(o * n + best) * inner + i] {
                        best = k;
                    }
                }
                argmax[r] = best;
                out[r] = xd[(o * n + best) * inner + i];
            }
        }
        if self.graph.track_kinks.get() {
            argmax.iter().for_each(|&k| self.graph.note_kink(k as u64));
        }
        let mut shape = x.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let id = self.id;
        Ok(self
            .graph
            .push(Tensor::from_parts(shape, out), &[id], || Op::Max {
                x: id,
                axis,
                argmax,
            }))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(self) -> Self {
        let total: F = self.value().data().iter().copied().sum();
        let x = self.id;
        self.graph.push(Tensor::scalar(total), &[x], || Op::SumAll(x))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let value = self.value().reshape(shape)?;
        let x = self.id;
        Ok(self.graph.push(value, &[x], || Op::Reshape(x)))
    }

    /// `len` consecutive slices starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let x = self.value();
        let (outer, n, inner) = kernels::split_axis(x.shape(), axis)?;
        if len == 0 || start + len > n {
            return Err(Error::Index {
                what: "narrow range end",
                index: start + len,
                bound: n,
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let id = self.id;
        Ok(self
            .graph
            .push(Tensor::from_parts(shape, out), &[id], || Op::Narrow {
                x: id,
                axis,
                start,
            }))
    }

    /// Rescales each vector along the last axis to norm `‖v‖²/(1+‖v‖²)`,
    /// keeping its direction. The zero vector maps to zero.
    pub fn squash(self) -> Result<Self> {
        let x = self.value();
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::contract("squash of a rank-0 tensor"))?;
        let mut out = x.to_vec();
        for v in out.chunks_mut(d) {
            let n2: F = v.iter().map(|&a| a * a).sum();
            let factor = n2.sqrt() / (F::one() + n2);
            v.iter_mut().for_each(|a| *a *= factor);
        }
        let id = self.id;
        Ok(self
            .graph
            .push(Tensor::from_parts(x.shape().to_vec(), out), &[id], || {
                Op::Squash(id)
            }))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1/(1-rate)`. A zero rate is the identity.
    pub fn dropout(self, rate: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(self);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask = Tensor::from_fn(self.shape(), |_| {
            if rng.gen::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        });
        self.mul(self.graph.constant(mask))
    }
}

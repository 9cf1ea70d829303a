//! Tape-based reverse-mode automatic differentiation with support for
//! higher-order gradients.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. [`Tape::grad`]
//! walks the recorded nodes in reverse, and every backward rule is itself
//! written with `Var` operations, so the gradients it returns are ordinary
//! tape nodes. Differentiating a function of those gradients (for example a
//! loss evaluated after several SGD steps) is just another call to `grad`.
//!
//! ```
//! use mct::numeric::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = x.square();
//! let dy = tape.grad(y, &[x]).unwrap()[0];
//! assert_eq!(dy.item(), 6.0);
//! let d2y = tape.grad(dy, &[x]).unwrap()[0];
//! assert_eq!(d2y.item(), 2.0);
//! ```
//!
//! A tape is meant to live for one unit of work (one outer iteration) and
//! then be dropped as a whole.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Exp(usize),
    Sqrt(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    BroadcastAxis(usize, usize),
    BroadcastScalar(usize),
    LogSoftmax(usize),
    GatherRows(usize, Vec<usize>),
    ScatterRows(usize, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::BroadcastAxis(..) => "broadcast_axis",
            Op::BroadcastScalar(..) => "broadcast",
            Op::LogSoftmax(..) => "log_softmax",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
        }
    }

    fn inputs(&self) -> ([usize; 2], usize) {
        match *self {
            Op::Leaf => ([0, 0], 0),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MulScalar(a, b)
            | Op::MatMul(a, b) => ([a, b], 2),
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::BroadcastAxis(a, _)
            | Op::BroadcastScalar(a)
            | Op::LogSoftmax(a)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _) => ([a, 0], 1),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Arena of recorded operations. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: bool,
    first_non_finite: Cell<Option<usize>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that remembers the first node whose value is NaN or infinite;
    /// see [`Tape::verify_finite`].
    pub fn with_finite_checks() -> Self {
        Tape {
            check_finite: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input tensor. Whether it is differentiated is decided by the
    /// `wrt` list passed to [`Tape::grad`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    pub fn verify_finite(&self) -> Result<()> {
        match self.first_non_finite.get() {
            None => Ok(()),
            Some(node) => Err(Error::NonFinite {
                node,
                op: self.nodes.borrow()[node].op.name(),
            }),
        }
    }

    fn push(&self, op: Op, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.check_finite && self.first_non_finite.get().is_none() && !value.is_finite() {
            self.first_non_finite.set(Some(id));
        }
        nodes.push(Node { op, value });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned variables live on this tape and can be differentiated again.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.check_same_tape(output);
        let out = output.id;
        {
            let v = self.value(out);
            if v.numel() != 1 {
                return Err(Error::NotScalar {
                    shape: v.shape().to_vec(),
                });
            }
        }
        let Some(lo) = wrt.iter().map(|w| w.id).min() else {
            return Ok(Vec::new());
        };
        if let Some(w) = wrt.iter().find(|w| w.id > out) {
            return Err(Error::Unreachable { index: w.id });
        }

        // Nodes that depend on some `wrt` and that `output` depends on.
        let span = out + 1 - lo;
        let mut reach = vec![false; span];
        for w in wrt {
            self.check_same_tape(*w);
            reach[w.id - lo] = true;
        }
        let mut needed = vec![false; span];
        {
            let nodes = self.nodes.borrow();
            for i in lo..=out {
                if reach[i - lo] {
                    continue;
                }
                let (ins, k) = nodes[i].op.inputs();
                reach[i - lo] = ins[..k].iter().any(|&j| j >= lo && reach[j - lo]);
            }
            needed[span - 1] = reach[span - 1];
            for i in (lo..=out).rev() {
                if !needed[i - lo] {
                    continue;
                }
                let (ins, k) = nodes[i].op.inputs();
                for &j in &ins[..k] {
                    if j >= lo && reach[j - lo] {
                        needed[j - lo] = true;
                    }
                }
            }
        }
        if let Some(w) = wrt.iter().find(|w| !needed[w.id - lo]) {
            return Err(Error::Unreachable { index: w.id });
        }

        let mut adjoint: Vec<Option<Var<'t>>> = vec![None; span];
        let seed = Tensor::ones(self.value(out).shape());
        adjoint[span - 1] = Some(self.leaf(seed));
        for i in (lo..=out).rev() {
            if !needed[i - lo] {
                continue;
            }
            let Some(g) = adjoint[i - lo] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let wants = |j: usize| j >= lo && needed[j - lo];
            for (j, gj) in self.backward(&op, i, g, &wants)? {
                adjoint[j - lo] = Some(match adjoint[j - lo] {
                    None => gj,
                    Some(acc) => acc.add(gj)?,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| adjoint[w.id - lo].expect("needed wrt always receives an adjoint"))
            .collect())
    }

    /// Vector-Jacobian product of node `id` for upstream gradient `g`,
    /// expressed in tape operations so it can be differentiated again.
    fn backward<'t>(
        &'t self,
        op: &Op,
        id: usize,
        g: Var<'t>,
        wants: &dyn Fn(usize) -> bool,
    ) -> Result<Vec<(usize, Var<'t>)>> {
        let var = |i: usize| Var { tape: self, id: i };
        let out = var(id);
        let mut grads = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(a) {
                    grads.push((a, g));
                }
                if wants(b) {
                    grads.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    grads.push((a, g));
                }
                if wants(b) {
                    grads.push((b, g.scale(-1.0)));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    grads.push((a, g.mul(var(b))?));
                }
                if wants(b) {
                    grads.push((b, g.mul(var(a))?));
                }
            }
            Op::Div(a, b) => {
                if wants(a) {
                    grads.push((a, g.div(var(b))?));
                }
                if wants(b) {
                    grads.push((b, g.mul(out)?.div(var(b))?.scale(-1.0)));
                }
            }
            Op::Scale(a, c) => grads.push((a, g.scale(c))),
            Op::MulScalar(x, s) => {
                if wants(x) {
                    grads.push((x, g.mul_scalar(var(s))?));
                }
                if wants(s) {
                    grads.push((s, g.mul(var(x))?.sum()));
                }
            }
            Op::MatMul(a, b) => {
                if wants(a) {
                    grads.push((a, g.matmul(var(b).transpose()?)?));
                }
                if wants(b) {
                    grads.push((b, var(a).transpose()?.matmul(g)?));
                }
            }
            Op::Transpose(a) => grads.push((a, g.transpose()?)),
            Op::Relu(a) => {
                let mask = self.value(a).step();
                let mask = self.leaf(mask);
                grads.push((a, g.mul(mask)?));
            }
            Op::Exp(a) => grads.push((a, g.mul(out)?)),
            Op::Sqrt(a) => grads.push((a, g.scale(0.5).div(out)?)),
            Op::Square(a) => grads.push((a, g.mul(var(a).scale(2.0))?)),
            Op::Sum(a) => {
                let shape = self.value(a).shape().to_vec();
                grads.push((a, g.broadcast_to(&shape)?));
            }
            Op::Mean(a) => {
                let shape = self.value(a).shape().to_vec();
                let n = shape.iter().product::<usize>() as f64;
                grads.push((a, g.broadcast_to(&shape)?.scale(1.0 / n)));
            }
            Op::SumAxis(a, axis) => {
                let count = self.value(a).shape()[axis];
                grads.push((a, g.broadcast_axis(axis, count)?));
            }
            Op::BroadcastAxis(a, axis) => grads.push((a, g.sum_axis(axis)?)),
            Op::BroadcastScalar(a) => grads.push((a, g.sum())),
            Op::LogSoftmax(a) => {
                // d/dx = g - softmax(x) * rowsum(g)
                let n = self.value(a).shape()[1];
                let row_sums = g.sum_axis(1)?.broadcast_axis(1, n)?;
                grads.push((a, g.sub(out.exp().mul(row_sums)?)?));
            }
            Op::GatherRows(a, ref idx) => {
                let rows = self.value(a).shape()[0];
                grads.push((a, g.scatter_rows(idx, rows)?));
            }
            Op::ScatterRows(a, ref idx) => grads.push((a, g.gather_rows(idx)?)),
        }
        Ok(grads)
    }

    fn check_same_tape(&self, v: Var<'_>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "variable belongs to a different tape"
        );
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    /// Runs `f` on a borrowed view of this variable's value.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value(self.id))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// Value of a one-element variable.
    ///
    /// # Panics
    /// If the variable has more than one element.
    pub fn item(&self) -> f64 {
        self.tape
            .value(self.id)
            .item()
            .expect("item() on a non-scalar variable")
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.value(self.id));
        self.tape.push(op, value)
    }

    fn try_unary(self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = f(&self.tape.value(self.id))?;
        Ok(self.tape.push(op, value))
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        self.tape.check_same_tape(other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        Ok(self.tape.push(op, value))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), Tensor::add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), Tensor::sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), Tensor::mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div(self.id, other.id), Tensor::div)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.id, other.id), Tensor::matmul)
    }

    /// Multiplies by a one-element variable, differentiable in both arguments.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        self.binary(s, Op::MulScalar(self.id, s.id), Tensor::mul_scalar)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |t| t.scale(c))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), Tensor::relu)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), Tensor::exp)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), Tensor::sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), Tensor::square)
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), Tensor::sum)
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id), Tensor::mean)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.try_unary(Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.try_unary(Op::SumAxis(self.id, axis), |t| t.sum_axis(axis))
    }

    pub fn broadcast_axis(self, axis: usize, count: usize) -> Result<Var<'t>> {
        self.try_unary(Op::BroadcastAxis(self.id, axis), |t| {
            t.broadcast_axis(axis, count)
        })
    }

    /// Broadcasts a one-element variable to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        self.try_unary(Op::BroadcastScalar(self.id), |t| t.broadcast_scalar(shape))
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        self.try_unary(Op::LogSoftmax(self.id), Tensor::log_softmax)
    }

    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        self.try_unary(Op::GatherRows(self.id, indices.to_vec()), |t| {
            t.gather_rows(indices)
        })
    }

    pub fn scatter_rows(self, indices: &[usize], rows: usize) -> Result<Var<'t>> {
        self.try_unary(Op::ScatterRows(self.id, indices.to_vec()), |t| {
            t.scatter_rows(indices, rows)
        })
    }
}

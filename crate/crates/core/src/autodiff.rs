//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar result walks the recording in reverse and
//! accumulates `d root / d node` into each node's gradient. Node ids are
//! assigned in creation order, so the recording is always a topologically
//! sorted DAG.
//!
//! ```
//! use drl_core::autodiff::Tape;
//! use drl_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).data()[0], 6.0);
//! ```
//!
//! A tape belongs to one thread; build a fresh one per training step.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// Lower bound applied to the argument of [`Var::log`].
pub const LOG_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Neg(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Log(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    ConcatCols(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let grad = Tensor::zeros(value.shape());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf (a parameter or an input we want gradients for).
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient; backward stops here.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn grad(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad.fill(0.0);
        }
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulates `d root / d node` into every node reachable from `root`.
    ///
    /// Adjoints are computed in a scratch buffer and then added to the stored
    /// gradients, so two calls without [`Tape::zero_grad`] give exactly twice
    /// the gradient of one call.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[root.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.id + 1];
        adj[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut adj);
            nodes[id].grad.add_assign(&g);
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], nodes: &[Node], id: usize, contrib: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut adj[id] {
        Some(existing) => existing.add_assign(&contrib),
        slot @ None => *slot = Some(contrib),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[a].requires_grad {
                let mut ga = vec![0.0; m * k];
                matmul_nt_into(g.data(), bv.data(), &mut ga, m, k, n);
                accumulate(adj, nodes, a, Tensor::new(vec![m, k], ga).unwrap());
            }
            if nodes[b].requires_grad {
                let mut gb = vec![0.0; k * n];
                matmul_tn_into(av.data(), g.data(), &mut gb, m, k, n);
                accumulate(adj, nodes, b, Tensor::new(vec![k, n], gb).unwrap());
            }
        }
        Op::Add(a, b) => {
            accumulate(adj, nodes, a, g.clone());
            accumulate(adj, nodes, b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(adj, nodes, a, g.clone());
            accumulate(adj, nodes, b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if nodes[a].requires_grad {
                accumulate(adj, nodes, a, g.zip_map(&nodes[b].value, |x, y| x * y).unwrap());
            }
            if nodes[b].requires_grad {
                accumulate(adj, nodes, b, g.zip_map(&nodes[a].value, |x, y| x * y).unwrap());
            }
        }
        Op::AddBias(a, bias) => {
            accumulate(adj, nodes, a, g.clone());
            if nodes[bias].requires_grad {
                let cols = g.cols();
                let mut gb = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                let shape = nodes[bias].value.shape().to_vec();
                accumulate(adj, nodes, bias, Tensor::new(shape, gb).unwrap());
            }
        }
        Op::Scale(a, c) => accumulate(adj, nodes, a, g.map(|v| v * c)),
        Op::AddScalar(a) => accumulate(adj, nodes, a, g.clone()),
        Op::Neg(a) => accumulate(adj, nodes, a, g.map(|v| -v)),
        Op::Sigmoid(a) => {
            let d = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s)).unwrap();
            accumulate(adj, nodes, a, d);
        }
        Op::Tanh(a) => {
            let d = g.zip_map(&node.value, |gv, o| gv * (1.0 - o * o)).unwrap();
            accumulate(adj, nodes, a, d);
        }
        Op::Relu(a) => {
            let d = g
                .zip_map(&nodes[a].value, |gv, x| if x > 0.0 { gv } else { 0.0 })
                .unwrap();
            accumulate(adj, nodes, a, d);
        }
        Op::Log(a) => {
            let d = g
                .zip_map(&nodes[a].value, |gv, x| if x >= LOG_FLOOR { gv / x } else { 0.0 })
                .unwrap();
            accumulate(adj, nodes, a, d);
        }
        Op::Clamp(a, lo, hi) => {
            let d = g
                .zip_map(&nodes[a].value, |gv, x| if (lo..=hi).contains(&x) { gv } else { 0.0 })
                .unwrap();
            accumulate(adj, nodes, a, d);
        }
        Op::Sum(a) => {
            let s = g.data()[0];
            accumulate(adj, nodes, a, Tensor::full(nodes[a].value.shape(), s));
        }
        Op::Mean(a) => {
            let n = nodes[a].value.len() as f64;
            let s = g.data()[0] / n;
            accumulate(adj, nodes, a, Tensor::full(nodes[a].value.shape(), s));
        }
        Op::ConcatCols(a, b) => {
            let (ca, cb) = (nodes[a].value.cols(), nodes[b].value.cols());
            let rows = g.rows();
            let mut ga = Vec::with_capacity(rows * ca);
            let mut gb = Vec::with_capacity(rows * cb);
            for row in g.data().chunks(ca + cb) {
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            let sa = nodes[a].value.shape().to_vec();
            let sb = nodes[b].value.shape().to_vec();
            accumulate(adj, nodes, a, Tensor::new(sa, ga).unwrap());
            accumulate(adj, nodes, b, Tensor::new(sb, gb).unwrap());
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.nodes.borrow()[self.id].value);
        let rg = self.tape.requires(self.id);
        self.tape.push(value, op, rg)
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        let rg = self.tape.requires(self.id) || self.tape.requires(other.id);
        Ok(self.tape.push(value, op, rg))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a.zip_map(b, |x, y| x + y))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a.zip_map(b, |x, y| x - y))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a.zip_map(b, |x, y| x * y))
    }

    /// Adds a bias vector of length `cols` to every row of an `n x cols` matrix.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(bias, Op::AddBias(self.id, bias.id), |a, b| {
            let cols = a.cols();
            if a.shape().len() != 2 || b.len() != cols {
                return Err(Error::Dimension(format!(
                    "bias {:?} for input {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(cols) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Ok(out)
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |a| a.map(|v| v * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| a.map(|v| v + c))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(self) -> Var<'t> {
        self.neg().add_scalar(1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |a| a.map(|v| -v))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.map(|v| v.max(0.0)))
    }

    /// Natural log with the argument clamped to `[LOG_FLOOR, inf)`.
    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.id), |a| a.map(|v| v.max(LOG_FLOOR).ln()))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |a| a.map(|v| v.clamp(lo, hi)))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.reduce(Op::Sum(self.id), |a| a.sum())
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.reduce(Op::Mean(self.id), |a| a.sum() / a.len() as f64)
    }

    fn reduce(self, op: Op, f: impl Fn(&Tensor) -> f64) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if v.is_empty() {
                return Err(Error::Domain("reduction over an empty tensor".into()));
            }
            f(v)
        };
        let rg = self.tape.requires(self.id);
        Ok(self.tape.push(Tensor::scalar(value), op, rg))
    }

    pub fn concat_columns(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::ConcatCols(self.id, other.id), |a, b| a.concat_columns(b))
    }
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` builds a scalar on the given tape from leaf vars holding `params`.
/// Returns `max |analytic - numeric| / max(1, |numeric|)` over all entries.
pub fn grad_check<F>(params: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&tape, &vars)?.item();
        if !out.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {out}")));
        }
        Ok(out)
    };

    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.var(p.clone())).collect();
    let root = f(&tape, &vars)?;
    if !root.item().is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {}", root.item())));
    }
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut work = params.to_vec();
    let mut max_err: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (grad.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

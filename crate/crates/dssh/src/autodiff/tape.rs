//! Define-by-run reverse-mode differentiation tape.
//!
//! A [`Tape`] records every operation executed through a [`Var`] handle and
//! replays adjoints in reverse order on [`Tape::backward`]. Tapes are rebuilt
//! per forward pass and confined to one thread; independent tapes may run on
//! different threads.

use std::cell::RefCell;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Stable sigmoid, also the softplus derivative.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(x))`.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddConst(usize),
    MulConst(usize, f64),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    ClampMax(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols {
        input: usize,
        start: usize,
        end: usize,
    },
    BroadcastCols(usize, usize),
    BroadcastRows(usize, usize),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    /// First non-finite forward value, if any: (node id, op name).
    nonfinite: Option<(usize, &'static str)>,
    /// Number of elements clamped by overflow guards (e.g. log-normal exponents).
    clamped: usize,
}

/// Gradient tape. See the module docs.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a tensor that does not require gradients (data, noise...).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, false, Op::Leaf)
    }

    /// Records a rank-0 constant.
    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Records a tensor that participates in gradient computation.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.insert(value, true, Op::Leaf)
    }

    fn insert(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if inner.nonfinite.is_none() && !value.all_finite() {
            inner.nonfinite = Some((id, op_name(&op)));
        }
        inner.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var { tape: self, id }
    }

    /// First op that produced a non-finite value, if any.
    pub fn first_nonfinite(&self) -> Option<String> {
        self.inner
            .borrow()
            .nonfinite
            .map(|(id, name)| format!("node {id} ({name})"))
    }

    /// Errors if any recorded value is non-finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite() {
            None => Ok(()),
            Some(detail) => Err(Error::NonFinite { at: "tape", detail }),
        }
    }

    /// Number of elements saturated by overflow clamps so far.
    pub fn clamp_count(&self) -> usize {
        self.inner.borrow().clamped
    }

    /// Runs the reverse pass from a scalar `loss`, accumulating gradients
    /// into every reachable node with `requires_grad`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "var from another tape");
        let mut inner = self.inner.borrow_mut();
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(Error::Domain {
                op: "backward",
                detail: format!(
                    "loss must be scalar, got shape {:?}",
                    inner.nodes[loss.id].value.shape()
                ),
            });
        }
        if !inner.nodes[loss.id].requires_grad {
            // Constant loss: gradient of every leaf is identically zero.
            return Ok(());
        }
        inner.nodes[loss.id].grad = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if !inner.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = inner.nodes[id].grad.clone() else {
                continue;
            };
            let op = inner.nodes[id].op.clone();
            propagate(&mut inner.nodes, id, &g, &op);
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`, if populated.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[v.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Clears all gradient buffers, keeping values.
    pub fn zero_grad(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[id].value)
    }

    fn with_two<R>(&self, a: usize, b: usize, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes[a].value, &inner.nodes[b].value)
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].value.shape().to_vec()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddConst(..) => "add_const",
        Op::MulConst(..) => "mul_const",
        Op::Neg(..) => "neg",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Square(..) => "square",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Softplus(..) => "softplus",
        Op::ClampMax(..) => "clamp_max",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumAxis(..) => "sum_axis",
        Op::MeanAxis(..) => "mean_axis",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::BroadcastCols(..) => "broadcast_cols",
        Op::BroadcastRows(..) => "broadcast_rows",
    }
}

/// Adds `delta` into the gradient slot of `nodes[id]` when it tracks gradients.
fn accumulate(nodes: &mut [Node], id: usize, delta: impl Iterator<Item = f64>) {
    let node = &mut nodes[id];
    if !node.requires_grad {
        return;
    }
    let numel = node.value.numel();
    let grad = node.grad.get_or_insert_with(|| vec![0.0; numel]);
    if numel == 1 {
        // Scalar slot: reduce the incoming contribution.
        grad[0] += delta.sum::<f64>();
    } else {
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

/// Pairs the output gradient with a possibly-scalar operand, yielding
/// per-output-element operand values.
fn spread<'a>(value: &'a [f64], out_len: usize) -> impl Iterator<Item = f64> + 'a {
    let scalar = value.len() == 1 && out_len != 1;
    (0..out_len).map(move |i| if scalar { value[0] } else { value[i] })
}

fn propagate(nodes: &mut [Node], id: usize, g: &[f64], op: &Op) {
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, a, g.iter().copied());
            accumulate(nodes, b, g.iter().copied());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, a, g.iter().copied());
            accumulate(nodes, b, g.iter().map(|v| -v));
        }
        Op::Mul(a, b) => {
            let av: Vec<f64> = spread(nodes[a].value.data(), g.len()).collect();
            let bv: Vec<f64> = spread(nodes[b].value.data(), g.len()).collect();
            accumulate(nodes, a, g.iter().zip(&bv).map(|(gv, b)| gv * b));
            accumulate(nodes, b, g.iter().zip(&av).map(|(gv, a)| gv * a));
        }
        Op::Div(a, b) => {
            let av: Vec<f64> = spread(nodes[a].value.data(), g.len()).collect();
            let bv: Vec<f64> = spread(nodes[b].value.data(), g.len()).collect();
            accumulate(nodes, a, g.iter().zip(&bv).map(|(gv, b)| gv / b));
            accumulate(
                nodes,
                b,
                g.iter()
                    .zip(av.iter().zip(&bv))
                    .map(|(gv, (a, b))| -gv * a / (b * b)),
            );
        }
        Op::AddConst(a) => accumulate(nodes, a, g.iter().copied()),
        Op::MulConst(a, c) => accumulate(nodes, a, g.iter().map(|v| v * c)),
        Op::Neg(a) => accumulate(nodes, a, g.iter().map(|v| -v)),
        Op::Exp(a) => {
            let out: Vec<f64> = nodes[id].value.data().to_vec();
            accumulate(nodes, a, g.iter().zip(out).map(|(gv, o)| gv * o));
        }
        Op::Log(a) => {
            let av: Vec<f64> = nodes[a].value.data().to_vec();
            accumulate(nodes, a, g.iter().zip(av).map(|(gv, x)| gv / x));
        }
        Op::Sqrt(a) => {
            let out: Vec<f64> = nodes[id].value.data().to_vec();
            accumulate(nodes, a, g.iter().zip(out).map(|(gv, o)| gv / (2.0 * o)));
        }
        Op::Square(a) => {
            let av: Vec<f64> = nodes[a].value.data().to_vec();
            accumulate(nodes, a, g.iter().zip(av).map(|(gv, x)| 2.0 * x * gv));
        }
        Op::Tanh(a) => {
            let out: Vec<f64> = nodes[id].value.data().to_vec();
            accumulate(nodes, a, g.iter().zip(out).map(|(gv, o)| gv * (1.0 - o * o)));
        }
        Op::Sigmoid(a) => {
            let out: Vec<f64> = nodes[id].value.data().to_vec();
            accumulate(nodes, a, g.iter().zip(out).map(|(gv, o)| gv * o * (1.0 - o)));
        }
        Op::Softplus(a) => {
            let av: Vec<f64> = nodes[a].value.data().to_vec();
            accumulate(nodes, a, g.iter().zip(av).map(|(gv, x)| gv * sigmoid(x)));
        }
        Op::ClampMax(a, hi) => {
            let av: Vec<f64> = nodes[a].value.data().to_vec();
            accumulate(
                nodes,
                a,
                g.iter().zip(av).map(|(gv, x)| if x <= hi { *gv } else { 0.0 }),
            );
        }
        Op::Matmul(a, b) => {
            // c = a·b with a: [m×k], b: [k×n]; da = g·bᵀ, db = aᵀ·g.
            let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
            let n = nodes[b].value.shape()[1];
            if nodes[a].requires_grad {
                let bv = nodes[b].value.data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        for p in 0..k {
                            da[i * k + p] += gv * bv[p * n + j];
                        }
                    }
                }
                accumulate(nodes, a, da.into_iter());
            }
            if nodes[b].requires_grad {
                let av = nodes[a].value.data();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += x * g[i * n + j];
                        }
                    }
                }
                accumulate(nodes, b, db.into_iter());
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
            // output is [n×m]; g indexed [j, i]
            let mut da = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    da[i * n + j] = g[j * m + i];
                }
            }
            accumulate(nodes, a, da.into_iter());
        }
        Op::Sum(a) => {
            let numel = nodes[a].value.numel();
            accumulate(nodes, a, (0..numel).map(|_| g[0]));
        }
        Op::Mean(a) => {
            let numel = nodes[a].value.numel();
            let scale = 1.0 / numel as f64;
            accumulate(nodes, a, (0..numel).map(|_| g[0] * scale));
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let (m, n) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
            let scale = match op {
                Op::MeanAxis(..) => {
                    if axis == 0 {
                        1.0 / m as f64
                    } else {
                        1.0 / n as f64
                    }
                }
                _ => 1.0,
            };
            let mut da = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    da[i * n + j] = scale * if axis == 0 { g[j] } else { g[i] };
                }
            }
            accumulate(nodes, a, da.into_iter());
        }
        Op::ConcatCols(ref parts) => {
            let rows = nodes[id].value.shape()[0];
            let total: usize = nodes[id].value.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.shape()[1];
                let mut dp = vec![0.0; rows * w];
                for i in 0..rows {
                    dp[i * w..(i + 1) * w]
                        .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                }
                accumulate(nodes, p, dp.into_iter());
                offset += w;
            }
        }
        Op::SliceCols { input, start, end } => {
            let (m, n) = (nodes[input].value.shape()[0], nodes[input].value.shape()[1]);
            let w = end - start;
            let mut da = vec![0.0; m * n];
            for i in 0..m {
                da[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            accumulate(nodes, input, da.into_iter());
        }
        Op::BroadcastCols(a, n) => {
            let m = nodes[a].value.shape()[0];
            let mut da = vec![0.0; m];
            for i in 0..m {
                for j in 0..n {
                    da[i] += g[i * n + j];
                }
            }
            accumulate(nodes, a, da.into_iter());
        }
        Op::BroadcastRows(a, rows) => {
            let n = nodes[a].value.shape()[1];
            let mut da = vec![0.0; n];
            for i in 0..rows {
                for j in 0..n {
                    da[j] += g[i * n + j];
                }
            }
            accumulate(nodes, a, da.into_iter());
        }
    }
}

// ───────────────────────── forward operations ─────────────────────────

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.with_node(self.id, |t| t.numel())
    }

    /// Clones the current value out of the tape.
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.tape.with_node(self.id, |t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Gradient populated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'t>, op: &'static str) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "{op}: vars from different tapes"
        );
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other, name);
        let built: Result<Tensor> = self.tape.with_two(self.id, other.id, |va, vb| {
            let (shape, data) = if va.shape() == vb.shape() {
                let d: Vec<f64> = va.iter().zip(vb.iter()).map(|(a, b)| f(*a, *b)).collect();
                (va.shape().to_vec(), d)
            } else if vb.is_scalar() {
                let b = vb.item();
                (va.shape().to_vec(), va.iter().map(|a| f(*a, b)).collect())
            } else if va.is_scalar() {
                let a = va.item();
                (vb.shape().to_vec(), vb.iter().map(|b| f(a, *b)).collect())
            } else {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: va.shape().to_vec(),
                    rhs: vb.shape().to_vec(),
                });
            };
            Tensor::new(shape, data)
        });
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.insert(built?, rg, op))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let t = self.tape.with_node(self.id, |v| {
            let data: Vec<f64> = v.iter().map(|x| f(*x)).collect();
            Tensor::new(v.shape().to_vec(), data).expect("unary shape")
        });
        self.tape.insert(t, self.requires_grad(), op)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::AddConst(self.id))
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|x| x * c, Op::MulConst(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    /// Natural log. Negative inputs are a domain error; log(0) records -inf
    /// and trips the tape finite-check.
    pub fn log(&self) -> Result<Var<'t>> {
        if self.tape.with_node(self.id, |v| v.iter().any(|x| *x < 0.0)) {
            return Err(Error::domain("log", "negative input"));
        }
        Ok(self.unary(f64::ln, Op::Log(self.id)))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        if self.tape.with_node(self.id, |v| v.iter().any(|x| *x < 0.0)) {
            return Err(Error::domain("sqrt", "negative input"));
        }
        Ok(self.unary(f64::sqrt, Op::Sqrt(self.id)))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    /// `log(1 + exp(x))` in the stable form `max(x, 0) + log1p(exp(-|x|))`.
    pub fn softplus(&self) -> Var<'t> {
        self.unary(softplus, Op::Softplus(self.id))
    }

    /// Elementwise `min(x, hi)`; clamped elements are counted on the tape.
    pub fn clamp_max(&self, hi: f64) -> Var<'t> {
        let clamped = self
            .tape
            .with_node(self.id, |v| v.iter().filter(|x| **x > hi).count());
        if clamped > 0 {
            self.tape.inner.borrow_mut().clamped += clamped;
        }
        self.unary(|x| x.min(hi), Op::ClampMax(self.id, hi))
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "matmul");
        let built: Result<Tensor> = self.tape.with_two(self.id, other.id, |va, vb| {
            if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: va.shape().to_vec(),
                    rhs: vb.shape().to_vec(),
                });
            }
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let (a, b) = (va.data(), vb.data());
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let x = a[i * k + p];
                    for j in 0..n {
                        c[i * n + j] += x * b[p * n + j];
                    }
                }
            }
            Tensor::new(vec![m, n], c)
        });
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .insert(built?, rg, Op::Matmul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let built: Result<Tensor> = self.tape.with_node(self.id, |v| {
            if v.rank() != 2 {
                return Err(Error::domain("transpose", format!("rank {} input", v.rank())));
            }
            let (m, n) = (v.shape()[0], v.shape()[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = v.data()[i * n + j];
                }
            }
            Tensor::new(vec![n, m], out)
        });
        Ok(self
            .tape
            .insert(built?, self.requires_grad(), Op::Transpose(self.id)))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&self) -> Var<'t> {
        let s: f64 = self.tape.with_node(self.id, |v| v.iter().sum());
        self.tape
            .insert(Tensor::scalar(s), self.requires_grad(), Op::Sum(self.id))
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean(&self) -> Var<'t> {
        let s: f64 = self
            .tape
            .with_node(self.id, |v| v.iter().sum::<f64>() / v.numel() as f64);
        self.tape
            .insert(Tensor::scalar(s), self.requires_grad(), Op::Mean(self.id))
    }

    fn reduce_axis(&self, axis: usize, mean: bool, name: &'static str) -> Result<Var<'t>> {
        let built: Result<Tensor> = self.tape.with_node(self.id, |v| {
            if v.rank() != 2 || axis >= 2 {
                return Err(Error::domain(
                    name,
                    format!("axis {axis} invalid for shape {:?}", v.shape()),
                ));
            }
            let (m, n) = (v.shape()[0], v.shape()[1]);
            let (out_len, denom) = if axis == 0 { (n, m) } else { (m, n) };
            let mut out = vec![0.0; out_len];
            for i in 0..m {
                for j in 0..n {
                    let o = if axis == 0 { j } else { i };
                    out[o] += v.data()[i * n + j];
                }
            }
            if mean {
                for o in out.iter_mut() {
                    *o /= denom as f64;
                }
            }
            Tensor::new(vec![out_len], out)
        });
        let op = if mean {
            Op::MeanAxis(self.id, axis)
        } else {
            Op::SumAxis(self.id, axis)
        };
        Ok(self.tape.insert(built?, self.requires_grad(), op))
    }

    /// Sum over one axis of a rank-2 tensor, yielding rank 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false, "sum_axis")
    }

    /// Mean over one axis of a rank-2 tensor, yielding rank 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true, "mean_axis")
    }

    /// Concatenates rank-2 tensors along columns.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().expect("concat of nothing");
        let inner = first.tape.inner.borrow();
        let rows = inner.nodes[first.id].value.shape()[0];
        let mut total = 0;
        for p in parts {
            first.same_tape(p, "concat_cols");
            let s = inner.nodes[p.id].value.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: inner.nodes[first.id].value.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += s[1];
        }
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for p in parts {
            let v = &inner.nodes[p.id].value;
            let w = v.shape()[1];
            for i in 0..rows {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        drop(inner);
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first.tape.insert(
            Tensor::new(vec![rows, total], data)?,
            rg,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let built: Result<Tensor> = self.tape.with_node(self.id, |v| {
            if v.rank() != 2 || end > v.shape()[1] || start > end {
                return Err(Error::domain(
                    "slice_cols",
                    format!("range {start}..{end} invalid for shape {:?}", v.shape()),
                ));
            }
            let (m, n, w) = (v.shape()[0], v.shape()[1], end - start);
            let mut data = vec![0.0; m * w];
            for i in 0..m {
                data[i * w..(i + 1) * w].copy_from_slice(&v.data()[i * n + start..i * n + end]);
            }
            Tensor::new(vec![m, w], data)
        });
        Ok(self.tape.insert(
            built?,
            self.requires_grad(),
            Op::SliceCols {
                input: self.id,
                start,
                end,
            },
        ))
    }

    /// Repeats a `[m×1]` column into `[m×n]`.
    pub fn broadcast_cols(&self, n: usize) -> Result<Var<'t>> {
        let built: Result<Tensor> = self.tape.with_node(self.id, |v| {
            if v.rank() != 2 || v.shape()[1] != 1 {
                return Err(Error::domain(
                    "broadcast_cols",
                    format!("expected [m×1], got {:?}", v.shape()),
                ));
            }
            let m = v.shape()[0];
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                data[i * n..(i + 1) * n].fill(v.data()[i]);
            }
            Tensor::new(vec![m, n], data)
        });
        Ok(self
            .tape
            .insert(built?, self.requires_grad(), Op::BroadcastCols(self.id, n)))
    }

    /// Repeats a `[1×n]` row into `[m×n]` (bias broadcast).
    pub fn broadcast_rows(&self, m: usize) -> Result<Var<'t>> {
        let built: Result<Tensor> = self.tape.with_node(self.id, |v| {
            if v.rank() != 2 || v.shape()[0] != 1 {
                return Err(Error::domain(
                    "broadcast_rows",
                    format!("expected [1×n], got {:?}", v.shape()),
                ));
            }
            let n = v.shape()[1];
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                data[i * n..(i + 1) * n].copy_from_slice(v.data());
            }
            Tensor::new(vec![m, n], data)
        });
        Ok(self
            .tape
            .insert(built?, self.requires_grad(), Op::BroadcastRows(self.id, m)))
    }
}

//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Expressions are recorded on a [`Tape`] as they are built; [`Tape::backward`]
//! then walks the tape in reverse and accumulates adjoints. Every node holds a
//! full [`Matrix`], so an MLP layer is one node rather than thousands of scalar
//! nodes.
//!
//! The primitive set is deliberately closed: affine maps, elementwise
//! arithmetic with broadcasting, `tanh`, `relu`, `softplus`, `exp`, `log`,
//! `square`, sums and means, row-wise log-sum-exp / log-softmax, elementwise
//! log-add-exp, column concatenation and broadcasting. Every loss in the crate
//! is a composition of these, which keeps the finite-difference suite in
//! `gradcheck` exhaustive.
//!
//! Binary operators broadcast their *right* operand: it may have the same shape
//! as the left one, be `1 × 1`, a column `rows × 1`, or a row `1 × cols`.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    LogSumExpRows(Var),
    LogSoftmaxRows(Var),
    LogAddExp(Var, Var),
    ConcatCols(Vec<Var>),
    Broadcast(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::LogSumExpRows(_) => "log_sum_exp",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::LogAddExp(..) => "log_add_exp",
            Op::ConcatCols(_) => "concat_cols",
            Op::Broadcast(_) => "broadcast",
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Records a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to a leaf, `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// `(parameter slot, node)` for every parameter leaf on the tape.
    pub(crate) fn param_nodes(&self) -> &[(usize, usize)] {
        &self.params
    }

    pub(crate) fn take(&mut self, node: usize) -> Option<Matrix> {
        self.grads[node].take()
    }
}

fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    b == a || b == (1, 1) || b == (a.0, 1) || b == (1, a.1)
}

#[inline]
fn bidx(b: &Matrix, r: usize, c: usize) -> f64 {
    let br = if b.rows() == 1 { 0 } else { r };
    let bc = if b.cols() == 1 { 0 } else { c };
    b.get(br, bc)
}

fn broadcast_binary(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            out.set(r, c, f(a.get(r, c), bidx(b, r, c)));
        }
    }
    out
}

/// Sums `g` down to `shape` (the inverse of broadcasting).
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        g
    } else if shape == (1, 1) {
        Matrix::scalar(g.sum())
    } else if shape.1 == 1 && shape.0 == g.rows() {
        g.sum_over_cols()
    } else {
        g.sum_over_rows()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn row_log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
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

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Matrix::scalar(value))
    }

    /// A differentiable leaf bound to parameter slot `slot`.
    pub fn param(&self, slot: usize, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes.borrow_mut()[v.0].param = Some(slot);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(Error::Shape {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        }
        let value = broadcast_binary(&self.value(a), &self.value(b), f);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// `x · w + b` with `x: n × in`, `w: in × out`, `b: 1 × out`.
    pub fn affine(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.1 != sw.0 {
            return Err(Error::Shape {
                op: "affine",
                lhs: sx,
                rhs: sw,
            });
        }
        let mut value = self.value(x).matmul(&self.value(w));
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb != (1, sw.1) {
                return Err(Error::Shape {
                    op: "affine bias",
                    lhs: (1, sw.1),
                    rhs: sb,
                });
            }
            let bias = self.value(b);
            for r in 0..value.rows() {
                for (o, bv) in value.row_mut(r).iter_mut().zip(bias.as_slice()) {
                    *o += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.needs(&inputs);
        Ok(self.push(value, Op::Affine { x, w, b }, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all entries, `1 × 1`.
    pub fn sum(&self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    /// Mean of all entries, `1 × 1`.
    pub fn mean(&self, a: Var) -> Var {
        let v = {
            let m = self.value(a);
            Matrix::scalar(m.sum() / m.len() as f64)
        };
        let rg = self.needs(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Per-row sum, `rows × 1`.
    pub fn row_sum(&self, a: Var) -> Var {
        let v = self.value(a).sum_over_cols();
        let rg = self.needs(&[a]);
        self.push(v, Op::RowSum(a), rg)
    }

    /// Per-row log-sum-exp, `rows × 1`.
    pub fn log_sum_exp_rows(&self, a: Var) -> Var {
        let v = {
            let m = self.value(a);
            let data = (0..m.rows()).map(|r| row_log_sum_exp(m.row(r))).collect();
            Matrix::from_vec(m.rows(), 1, data)
        };
        let rg = self.needs(&[a]);
        self.push(v, Op::LogSumExpRows(a), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let v = {
            let m = self.value(a);
            let mut out = m.clone();
            for r in 0..m.rows() {
                let lse = row_log_sum_exp(m.row(r));
                for o in out.row_mut(r) {
                    *o -= lse;
                }
            }
            out
        };
        let rg = self.needs(&[a]);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    /// Elementwise `log(exp(a) + exp(b))`, same shapes.
    pub fn log_add_exp(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op: "log_add_exp",
                lhs: sa,
                rhs: sb,
            });
        }
        let v = self.value(a).zip_map(&self.value(b), log_add_exp);
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::LogAddExp(a, b), rg))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: (rows, 0),
                    rhs: s,
                });
            }
        }
        let v = {
            let nodes = self.nodes.borrow();
            let mats: Vec<&Matrix> = parts.iter().map(|p| &nodes[p.0].value).collect();
            Matrix::hcat(&mats)
        };
        let rg = self.needs(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Expands a `1 × 1`, `rows × 1` or `1 × cols` node to `rows × cols`.
    pub fn broadcast(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let sa = self.shape(a);
        if !broadcast_ok((rows, cols), sa) {
            return Err(Error::Shape {
                op: "broadcast",
                lhs: (rows, cols),
                rhs: sa,
            });
        }
        let v = broadcast_binary(&Matrix::zeros(rows, cols), &self.value(a), |_, y| y);
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Broadcast(a), rg))
    }

    /// Name of the first primitive whose output contains NaN, or +∞ (−∞ is a
    /// legitimate log-density and is allowed). Leaves are skipped.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .find(|n| {
                n.value
                    .as_slice()
                    .iter()
                    .any(|v| v.is_nan() || *v == f64::INFINITY)
            })
            .map(|n| n.op.name())
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.0].value.shape();
        if out_shape != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: (1, 1),
                rhs: out_shape,
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[output.0] = Some(Matrix::scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], nodes: &[Node], v: Var, g: Matrix) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            let val = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    if nodes[x.0].requires_grad {
                        let gx = g.matmul_t(&nodes[w.0].value);
                        acc(&mut grads, &nodes, *x, gx);
                    }
                    if nodes[w.0].requires_grad {
                        let gw = nodes[x.0].value.t_matmul(&g);
                        acc(&mut grads, &nodes, *w, gw);
                    }
                    if let Some(b) = b {
                        acc(&mut grads, &nodes, *b, g.sum_over_rows());
                    }
                }
                Op::Add(a, b) => {
                    let sb = nodes[b.0].value.shape();
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, &nodes, *b, reduce_to(g.clone(), sb));
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Sub(a, b) => {
                    let sb = nodes[b.0].value.shape();
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, &nodes, *b, reduce_to(g.map(|v| -v), sb));
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[b.0].requires_grad {
                        let gb = g.zip_map(av, |gi, ai| gi * ai);
                        acc(&mut grads, &nodes, *b, reduce_to(gb, bv.shape()));
                    }
                    if nodes[a.0].requires_grad {
                        let ga = broadcast_binary(&g, bv, |gi, bi| gi * bi);
                        acc(&mut grads, &nodes, *a, ga);
                    }
                }
                Op::Div(a, b) => {
                    let bv = &nodes[b.0].value;
                    if nodes[b.0].requires_grad {
                        // d(a/b)/db = -(a/b)/b
                        let q = broadcast_binary(&g.zip_map(val, |gi, oi| -gi * oi), bv, |x, y| {
                            x / y
                        });
                        acc(&mut grads, &nodes, *b, reduce_to(q, bv.shape()));
                    }
                    if nodes[a.0].requires_grad {
                        let ga = broadcast_binary(&g, bv, |gi, bi| gi / bi);
                        acc(&mut grads, &nodes, *a, ga);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, &nodes, *a, g.map(|v| v * c));
                }
                Op::Offset(a) => acc(&mut grads, &nodes, *a, g),
                Op::Tanh(a) => {
                    acc(&mut grads, &nodes, *a, g.zip_map(val, |gi, y| gi * (1.0 - y * y)));
                }
                Op::Relu(a) => {
                    let x = &nodes[a.0].value;
                    let ga = g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Softplus(a) => {
                    let x = &nodes[a.0].value;
                    acc(&mut grads, &nodes, *a, g.zip_map(x, |gi, xi| gi * sigmoid(xi)));
                }
                Op::Exp(a) => acc(&mut grads, &nodes, *a, g.zip_map(val, |gi, y| gi * y)),
                Op::Log(a) => {
                    let x = &nodes[a.0].value;
                    acc(&mut grads, &nodes, *a, g.zip_map(x, |gi, xi| gi / xi));
                }
                Op::Square(a) => {
                    let x = &nodes[a.0].value;
                    acc(&mut grads, &nodes, *a, g.zip_map(x, |gi, xi| 2.0 * gi * xi));
                }
                Op::Sum(a) => {
                    let (r, c) = nodes[a.0].value.shape();
                    acc(&mut grads, &nodes, *a, Matrix::filled(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = nodes[a.0].value.shape();
                    let n = (r * c) as f64;
                    acc(&mut grads, &nodes, *a, Matrix::filled(r, c, g.item() / n));
                }
                Op::RowSum(a) => {
                    let (r, c) = nodes[a.0].value.shape();
                    let ga = broadcast_binary(&Matrix::zeros(r, c), &g, |_, gi| gi);
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let x = &nodes[a.0].value;
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let lse = val.get(r, 0);
                        if lse == f64::NEG_INFINITY {
                            continue;
                        }
                        let gr = g.get(r, 0);
                        for (o, xi) in ga.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o = gr * (xi - lse).exp();
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for r in 0..val.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for (o, y) in ga.row_mut(r).iter_mut().zip(val.row(r)) {
                            *o -= y.exp() * gsum;
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::LogAddExp(a, b) => {
                    let weight = |x: &Matrix| {
                        let mut w = g.clone();
                        for ((wi, xi), oi) in
                            w.as_mut_slice().iter_mut().zip(x.as_slice()).zip(val.as_slice())
                        {
                            *wi = if *oi == f64::NEG_INFINITY {
                                0.0
                            } else {
                                *wi * (xi - oi).exp()
                            };
                        }
                        w
                    };
                    if nodes[a.0].requires_grad {
                        let ga = weight(&nodes[a.0].value);
                        acc(&mut grads, &nodes, *a, ga);
                    }
                    if nodes[b.0].requires_grad {
                        let gb = weight(&nodes[b.0].value);
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pc = nodes[p.0].value.cols();
                        if nodes[p.0].requires_grad {
                            let mut gp = Matrix::zeros(g.rows(), pc);
                            for r in 0..g.rows() {
                                gp.row_mut(r)
                                    .copy_from_slice(&g.row(r)[offset..offset + pc]);
                            }
                            acc(&mut grads, &nodes, *p, gp);
                        }
                        offset += pc;
                    }
                }
                Op::Broadcast(a) => {
                    let sa = nodes[a.0].value.shape();
                    acc(&mut grads, &nodes, *a, reduce_to(g, sa));
                }
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|slot| (slot, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

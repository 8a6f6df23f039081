//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its parents, so nodes are always in topological order. A backward
//! sweep from a `1 × 1` node yields adjoints for every node on the tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::backend::Backend;
use crate::error::{AdError, Result};
use crate::params::{GradientMap, ParameterSet};
use crate::spectral::power_iteration;
use crate::tensor::Tensor;
use crate::unary::Unary;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Unary(usize, Unary),
    SumRows(usize),
    SumCols(usize),
    SumAll(usize),
    Col(usize, usize),
    HCat(Vec<usize>),
    Reshape(usize),
    Transpose(usize),
    SpectralNorm { a: usize, iters: usize, u: Vec<f64>, v: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(..) => "unary",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::SumAll(_) => "sum_all",
            Op::Col(..) => "col",
            Op::HCat(_) => "hcat",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::SpectralNorm { .. } => "spectral_norm",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Const => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNT(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Unary(a, _)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::Col(a, _)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::SpectralNorm { a, .. } => vec![*a],
            Op::HCat(parts) => parts.clone(),
        }
    }
}

/// Forward rule shared by recording and replay. `shape` is the recorded
/// output shape, needed only by reshape.
fn eval<'a>(op: &Op, get: impl Fn(usize) -> &'a Tensor, shape: (usize, usize)) -> Tensor {
    let v = |i: &usize| get(*i);
    match op {
        Op::Leaf | Op::Const => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => v(a).add(v(b)),
        Op::Sub(a, b) => v(a).sub(v(b)),
        Op::Mul(a, b) => v(a).mul(v(b)),
        Op::Div(a, b) => v(a).div(v(b)),
        Op::AddRow(a, b) => v(a).add_row(v(b)),
        Op::MulCol(a, b) => v(a).mul_col(v(b)),
        Op::MatMul(a, b) => v(a).matmul(v(b)),
        Op::MatMulNT(a, b) => v(a).matmul_nt(v(b)),
        Op::Scale(a, c) => v(a).scale(*c),
        Op::AddScalar(a, c) => v(a).add_scalar(*c),
        Op::Unary(a, f) => v(a).map(|x| f.apply(x)),
        Op::SumRows(a) => v(a).sum_rows(),
        Op::SumCols(a) => v(a).sum_cols(),
        Op::SumAll(a) => Tensor::scalar(v(a).sum()),
        Op::Col(a, j) => v(a).col(*j),
        Op::HCat(parts) => {
            let refs: Vec<&Tensor> = parts.iter().map(v).collect();
            Tensor::hcat(&refs)
        }
        Op::Reshape(a) => v(a).reshape(shape.0, shape.1),
        Op::Transpose(a) => v(a).transpose(),
        Op::SpectralNorm { a, iters, .. } => Tensor::scalar(power_iteration(v(a), *iters).sigma),
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Reverse-mode recording context. Single-threaded by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, usize>>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Adjoints {
    /// Adjoint of `v`; zeros if the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
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
        self.nodes.borrow().is_empty()
    }

    /// An unnamed differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push_raw(Op::Leaf, t, true)
    }

    /// The leaf registered under `name`, if it was evaluated on this tape.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.borrow().get(name).copied().map(Var)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.borrow().keys().cloned().collect()
    }

    /// Registers every entry of `params` as a named leaf.
    pub fn register(&self, params: &ParameterSet) {
        for (name, t) in params.iter() {
            self.param(name, t);
        }
    }

    /// Recomputes every derived node from the recorded leaves, in tape
    /// order. The result reproduces the recorded values bit for bit.
    pub fn replay(&self) -> Vec<Tensor> {
        let nodes = self.nodes.borrow();
        let mut vals: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let t = match node.op {
                Op::Leaf | Op::Const => node.value.clone(),
                _ => eval(&node.op, |i| &vals[i], node.value.dims()),
            };
            vals.push(t);
        }
        vals
    }

    fn push_raw(&self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, needs_grad });
        Var(nodes.len() - 1)
    }

    fn push(&self, op: Op, shape: (usize, usize)) -> Var {
        let (value, needs_grad) = {
            let nodes = self.nodes.borrow();
            let needs = op.parents().iter().any(|&p| nodes[p].needs_grad);
            (eval(&op, |i| &nodes[i].value, shape), needs)
        };
        self.push_raw(op, value, needs_grad)
    }

    /// Handle for the `i`-th recorded node.
    pub fn var_at(&self, i: usize) -> Var {
        assert!(i < self.len(), "node {i} is not on the tape");
        Var(i)
    }

    /// Recorded forward value of `v`.
    pub fn value_of(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn dims_of(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dims()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Reverse sweep from a `1 × 1` node.
    pub fn backward(&self, out: Var) -> Result<Adjoints> {
        let nodes = self.nodes.borrow();
        if nodes[out.0].value.dims() != (1, 1) {
            return Err(AdError::Contract(format!(
                "backward needs a scalar output, node {} has shape {:?}",
                out.0,
                nodes[out.0].value.dims()
            )));
        }
        let shapes: Vec<(usize, usize)> = nodes.iter().map(|n| n.value.dims()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::scalar(1.0));
        let acc = |grads: &mut Vec<Option<Tensor>>, i: usize, g: Tensor| {
            if !nodes[i].needs_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &nodes[i];
            if !g.is_finite() {
                return Err(AdError::Numeric { node: i, op: node.op.name() });
            }
            let val = |j: usize| &nodes[j].value;
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(&mut grads, *a, g.mul(val(*b)));
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut grads, *b, g.mul(val(*a)));
                    }
                }
                Op::Div(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(&mut grads, *a, g.div(val(*b)));
                    }
                    if nodes[*b].needs_grad {
                        let db = g.mul(&node.value).div(val(*b)).scale(-1.0);
                        acc(&mut grads, *b, db);
                    }
                }
                Op::AddRow(a, r) => {
                    if nodes[*r].needs_grad {
                        acc(&mut grads, *r, g.sum_rows());
                    }
                    acc(&mut grads, *a, g);
                }
                Op::MulCol(a, c) => {
                    if nodes[*c].needs_grad {
                        acc(&mut grads, *c, g.mul(val(*a)).sum_cols());
                    }
                    if nodes[*a].needs_grad {
                        acc(&mut grads, *a, g.mul_col(val(*c)));
                    }
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(&mut grads, *a, g.matmul_nt(val(*b)));
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut grads, *b, val(*a).matmul_tn(&g));
                    }
                }
                Op::MatMulNT(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(&mut grads, *a, g.matmul(val(*b)));
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut grads, *b, g.matmul_tn(val(*a)));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.scale(*c)),
                Op::AddScalar(a, _) => acc(&mut grads, *a, g),
                Op::Unary(a, f) => {
                    let d = val(*a).map(|x| f.derivative_at(x));
                    acc(&mut grads, *a, g.mul(&d));
                }
                Op::SumRows(a) => {
                    let (n, m) = shapes[*a];
                    let mut out = Tensor::zeros(n, m);
                    for r in 0..n {
                        out.data[r * m..(r + 1) * m].copy_from_slice(&g.data);
                    }
                    acc(&mut grads, *a, out);
                }
                Op::SumCols(a) => {
                    let (n, m) = shapes[*a];
                    let mut out = Tensor::zeros(n, m);
                    for r in 0..n {
                        out.data[r * m..(r + 1) * m].fill(g.data[r]);
                    }
                    acc(&mut grads, *a, out);
                }
                Op::SumAll(a) => {
                    let (n, m) = shapes[*a];
                    acc(&mut grads, *a, Tensor::full(n, m, g.item()));
                }
                Op::Col(a, j) => {
                    let (n, m) = shapes[*a];
                    let mut out = Tensor::zeros(n, m);
                    for r in 0..n {
                        out.data[r * m + j] = g.data[r];
                    }
                    acc(&mut grads, *a, out);
                }
                Op::HCat(parts) => {
                    let total = g.cols();
                    let n = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = shapes[p].1;
                        if nodes[p].needs_grad {
                            let mut out = Tensor::zeros(n, w);
                            for r in 0..n {
                                out.data[r * w..(r + 1) * w].copy_from_slice(
                                    &g.data[r * total + offset..r * total + offset + w],
                                );
                            }
                            acc(&mut grads, p, out);
                        }
                        offset += w;
                    }
                }
                Op::Reshape(a) => {
                    let (n, m) = shapes[*a];
                    acc(&mut grads, *a, g.reshape(n, m));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::SpectralNorm { a, u, v, .. } => {
                    let (n, m) = shapes[*a];
                    let s = g.item();
                    let mut out = Tensor::zeros(n, m);
                    for r in 0..n {
                        for c in 0..m {
                            out.data[r * m + c] = s * u[r] * v[c];
                        }
                    }
                    acc(&mut grads, *a, out);
                }
            }
        }
        grads.resize(nodes.len(), None);
        Ok(Adjoints { grads, shapes })
    }

    /// Gradient of the scalar `expr` with respect to every entry of `params`.
    /// Parameters that never reached the tape get zero gradients.
    pub fn grad(&self, expr: Var, params: &ParameterSet) -> Result<GradientMap> {
        let adj = self.backward(expr)?;
        let mut out = GradientMap::default();
        for (name, t) in params.iter() {
            let g = match self.param_var(name) {
                Some(v) => {
                    let g = adj.wrt(v);
                    if g.dims() != t.dims() {
                        return Err(AdError::Shape(format!(
                            "parameter {name} is {:?} but was taped as {:?}",
                            t.dims(),
                            g.dims()
                        )));
                    }
                    g
                }
                None => Tensor::zeros(t.rows(), t.cols()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

impl Backend for Tape {
    type T = Var;

    fn constant(&self, t: Tensor) -> Var {
        self.push_raw(Op::Const, t, false)
    }

    fn param(&self, name: &str, t: &Tensor) -> Var {
        if let Some(v) = self.param_var(name) {
            return v;
        }
        let v = self.leaf(t.clone());
        self.params.borrow_mut().insert(name.to_string(), v.0);
        v
    }

    fn value(&self, a: &Var) -> Tensor {
        self.value_of(*a)
    }

    fn dims(&self, a: &Var) -> (usize, usize) {
        self.dims_of(*a)
    }

    fn add(&self, a: &Var, b: &Var) -> Var {
        self.push(Op::Add(a.0, b.0), self.dims_of(*a))
    }

    fn sub(&self, a: &Var, b: &Var) -> Var {
        self.push(Op::Sub(a.0, b.0), self.dims_of(*a))
    }

    fn mul(&self, a: &Var, b: &Var) -> Var {
        self.push(Op::Mul(a.0, b.0), self.dims_of(*a))
    }

    fn div(&self, a: &Var, b: &Var) -> Var {
        self.push(Op::Div(a.0, b.0), self.dims_of(*a))
    }

    fn add_row(&self, a: &Var, row: &Var) -> Var {
        self.push(Op::AddRow(a.0, row.0), self.dims_of(*a))
    }

    fn mul_col(&self, a: &Var, col: &Var) -> Var {
        self.push(Op::MulCol(a.0, col.0), self.dims_of(*a))
    }

    fn matmul(&self, a: &Var, b: &Var) -> Var {
        self.push(Op::MatMul(a.0, b.0), (0, 0))
    }

    fn matmul_nt(&self, a: &Var, b: &Var) -> Var {
        self.push(Op::MatMulNT(a.0, b.0), (0, 0))
    }

    fn scale(&self, a: &Var, c: f64) -> Var {
        self.push(Op::Scale(a.0, c), (0, 0))
    }

    fn add_scalar(&self, a: &Var, c: f64) -> Var {
        self.push(Op::AddScalar(a.0, c), (0, 0))
    }

    fn unary(&self, a: &Var, f: Unary) -> Var {
        self.push(Op::Unary(a.0, f), (0, 0))
    }

    fn sum_rows(&self, a: &Var) -> Var {
        self.push(Op::SumRows(a.0), (0, 0))
    }

    fn sum_cols(&self, a: &Var) -> Var {
        self.push(Op::SumCols(a.0), (0, 0))
    }

    fn sum_all(&self, a: &Var) -> Var {
        self.push(Op::SumAll(a.0), (0, 0))
    }

    fn col(&self, a: &Var, j: usize) -> Var {
        self.push(Op::Col(a.0, j), (0, 0))
    }

    fn hcat(&self, parts: &[Var]) -> Var {
        self.push(Op::HCat(parts.iter().map(|p| p.0).collect()), (0, 0))
    }

    fn reshape(&self, a: &Var, rows: usize, cols: usize) -> Var {
        self.push(Op::Reshape(a.0), (rows, cols))
    }

    fn transpose(&self, a: &Var) -> Var {
        self.push(Op::Transpose(a.0), (0, 0))
    }

    fn spectral_norm(&self, a: &Var, iters: usize) -> Var {
        let t = power_iteration(&self.value_of(*a), iters);
        let value = Tensor::scalar(t.sigma);
        let op = Op::SpectralNorm { a: a.0, iters, u: t.u, v: t.v };
        self.push_raw(op, value, self.needs(*a))
    }
}

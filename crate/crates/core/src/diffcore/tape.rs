//! Recorded computation graph with a forward sweep and a single reverse sweep.
//!
//! Nodes are appended in construction order, so every operation's inputs
//! precede it and the node index is a valid topological order. Inputs are
//! named placeholders; `evaluate` binds them and caches every intermediate
//! value, `gradient` reuses the cache for one backward pass.

use std::collections::BTreeMap;

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};

pub type Bindings = BTreeMap<String, Tensor>;

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise maps with a known derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Square,
    Tanh,
    Sigmoid,
    Softplus,
    /// `max(αx, x)`; derivative at 0 is the right-branch slope 1.
    LeakyRelu(f64),
    /// Derivative mask of `LeakyRelu`: `α` for `x < 0`, else 1.
    LeakyReluSlope(f64),
    /// `max(αx, x)²`.
    SquaredLeakyRelu(f64),
    /// Derivative of `SquaredLeakyRelu`: `2·max(αx, x)·(α if x < 0 else 1)`.
    SquaredLeakyReluSlope(f64),
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::LeakyRelu(a) => {
                if x < 0.0 {
                    a * x
                } else {
                    x
                }
            }
            Unary::LeakyReluSlope(a) => {
                if x < 0.0 {
                    a
                } else {
                    1.0
                }
            }
            Unary::SquaredLeakyRelu(a) => {
                let r = if x < 0.0 { a * x } else { x };
                r * r
            }
            Unary::SquaredLeakyReluSlope(a) => {
                if x < 0.0 {
                    2.0 * a * a * x
                } else {
                    2.0 * x
                }
            }
        }
    }

    /// dy/dx given the input `x` and the cached output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::LeakyRelu(a) => {
                if x < 0.0 {
                    a
                } else {
                    1.0
                }
            }
            Unary::LeakyReluSlope(_) => 0.0,
            Unary::SquaredLeakyRelu(a) => Unary::SquaredLeakyReluSlope(a).apply(x),
            Unary::SquaredLeakyReluSlope(a) => {
                if x < 0.0 {
                    2.0 * a * a
                } else {
                    2.0
                }
            }
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
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Constant(Tensor),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    ScaleBy(Var, Var),
    MatVec(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Map(Var, Unary),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    Reshape(Var, Vec<usize>),
    LogSumExpRows(Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::ScaleBy(..) => "scale_by",
            Op::MatVec(..) => "matvec",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Sum(_) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::Map(..) => "map",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Reshape(..) => "reshape",
            Op::LogSumExpRows(_) => "logsumexp_rows",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    inputs: BTreeMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> Var {
        self.ops.push(op);
        self.values.push(None);
        Var(self.ops.len() - 1)
    }

    /// Declares a named input; declaring the same name twice returns the same node.
    pub fn input(&mut self, name: &str) -> Var {
        if let Some(&v) = self.inputs.get(name) {
            return v;
        }
        let v = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), v);
        v
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant(t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Offset(a, c))
    }

    /// Tensor `a` times the single-element node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        self.push(Op::ScaleBy(a, s))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Var {
        self.push(Op::MatVec(m, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.push(Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    /// Sums a matrix over `axis`, keeping it as an extent-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        self.push(Op::SumAxis(a, axis))
    }

    pub fn map(&mut self, a: Var, f: Unary) -> Var {
        self.push(Op::Map(a, f))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Unary::Log)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Unary::Square)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        self.push(Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        self.push(Op::Slice(a, axis, start, len))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        self.push(Op::Reshape(a, shape))
    }

    /// Row-wise `log Σ_j exp(a_ij)` of a matrix, as an m×1 column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        self.push(Op::LogSumExpRows(a))
    }

    /// Cached forward value of `v` from the last `evaluate`.
    pub fn value(&self, v: Var) -> Option<&Tensor> {
        self.values.get(v.0).and_then(Option::as_ref)
    }

    fn val(&self, v: Var) -> &Tensor {
        self.values[v.0].as_ref().expect("operands are evaluated before their consumers")
    }

    /// Forward sweep over every node up to `output`, caching intermediates.
    pub fn evaluate(&mut self, inputs: &Bindings, output: Var) -> Result<Tensor> {
        for v in self.values.iter_mut() {
            *v = None;
        }
        for i in 0..=output.0 {
            let value = self.forward_op(i, inputs)?;
            if let Some(bad) = value.values().iter().position(|x| !x.is_finite()) {
                let row = if value.rank() == 2 { bad / value.cols() } else { 0 };
                return Err(Error::NonFinite { op: i, kind: self.ops[i].kind(), row });
            }
            self.values[i] = Some(value);
        }
        Ok(self.val(output).clone())
    }

    fn forward_op(&self, i: usize, inputs: &Bindings) -> Result<Tensor> {
        let op = &self.ops[i];
        let err = |msg: String| Error::Op { op: i, kind: op.kind(), msg };
        let same_shape = |a: &Tensor, b: &Tensor| -> Result<()> {
            if a.shape() != b.shape() {
                return Err(err(format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape())));
            }
            Ok(())
        };
        Ok(match op {
            Op::Input(name) => inputs.get(name).cloned().ok_or_else(|| Error::Unbound(name.clone()))?,
            Op::Constant(t) => t.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                same_shape(x, y)?;
                let vals = x.values().iter().zip(y.values());
                let out: Vec<f64> = match op {
                    Op::Add(..) => vals.map(|(p, q)| p + q).collect(),
                    Op::Sub(..) => vals.map(|(p, q)| p - q).collect(),
                    _ => vals.map(|(p, q)| p * q).collect(),
                };
                Tensor::new(x.shape().to_vec(), out)?
            }
            Op::Scale(a, c) => self.val(*a).map(|x| c * x),
            Op::Offset(a, c) => self.val(*a).map(|x| x + c),
            Op::ScaleBy(a, s) => {
                let sv = self.val(*s);
                if sv.len() != 1 {
                    return Err(err(format!("scale operand must have one element, shape {:?}", sv.shape())));
                }
                let c = sv.item();
                self.val(*a).map(|x| c * x)
            }
            Op::MatVec(m, v) => {
                let (mt, vt) = (self.val(*m), self.val(*v));
                if mt.rank() != 2 || vt.rank() != 1 || mt.cols() != vt.len() {
                    return Err(err(format!("cannot multiply {:?} by vector {:?}", mt.shape(), vt.shape())));
                }
                Tensor::vector(matmul_raw(mt.values(), vt.values(), mt.rows(), mt.cols(), 1))
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows() {
                    return Err(err(format!("cannot multiply {:?} by {:?}", x.shape(), y.shape())));
                }
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                Tensor::matrix(m, n, matmul_raw(x.values(), y.values(), m, k, n))?
            }
            Op::MatMulT(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
                    return Err(err(format!("cannot multiply {:?} by transpose of {:?}", x.shape(), y.shape())));
                }
                let (m, k, n) = (x.rows(), x.cols(), y.rows());
                Tensor::matrix(m, n, matmul_nt_raw(x.values(), y.values(), m, k, n))?
            }
            Op::Transpose(a) => {
                let x = self.val(*a);
                if x.rank() != 2 {
                    return Err(err(format!("transpose needs a matrix, got {:?}", x.shape())));
                }
                x.transpose()
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::SumAxis(a, axis) => {
                let x = self.val(*a);
                if x.rank() != 2 || *axis > 1 {
                    return Err(err(format!("sum over axis {} of {:?}", axis, x.shape())));
                }
                let (r, c) = (x.rows(), x.cols());
                if *axis == 0 {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (o, v) in out.iter_mut().zip(x.row(i)) {
                            *o += v;
                        }
                    }
                    Tensor::matrix(1, c, out)?
                } else {
                    Tensor::matrix(r, 1, (0..r).map(|i| x.row(i).iter().sum()).collect())?
                }
            }
            Op::Map(a, f) => self.val(*a).map(|x| f.apply(x)),
            Op::Concat(parts, axis) => self.concat_forward(parts, *axis).map_err(err)?,
            Op::Slice(a, axis, start, len) => {
                let x = self.val(*a);
                slice_forward(x, *axis, *start, *len).map_err(err)?
            }
            Op::Reshape(a, shape) => {
                let x = self.val(*a);
                x.reshaped(shape.clone()).map_err(|e| err(e.to_string()))?
            }
            Op::LogSumExpRows(a) => {
                let x = self.val(*a);
                if x.rank() != 2 {
                    return Err(err(format!("needs a matrix, got {:?}", x.shape())));
                }
                let out = (0..x.rows()).map(|i| logsumexp(x.row(i))).collect();
                Tensor::matrix(x.rows(), 1, out)?
            }
        })
    }

    fn concat_forward(&self, parts: &[Var], axis: usize) -> std::result::Result<Tensor, String> {
        let ts: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let first = ts.first().ok_or("concat of nothing")?;
        match (first.rank(), axis) {
            (1, 0) => {
                if ts.iter().any(|t| t.rank() != 1) {
                    return Err("mixed ranks".into());
                }
                Ok(Tensor::vector(ts.iter().flat_map(|t| t.values().iter().copied()).collect()))
            }
            (2, 0) => {
                let c = first.cols();
                if ts.iter().any(|t| t.rank() != 2 || t.cols() != c) {
                    return Err("column counts differ".into());
                }
                let rows = ts.iter().map(|t| t.rows()).sum();
                let vals = ts.iter().flat_map(|t| t.values().iter().copied()).collect();
                Tensor::matrix(rows, c, vals).map_err(|e| e.to_string())
            }
            (2, 1) => {
                let r = first.rows();
                if ts.iter().any(|t| t.rank() != 2 || t.rows() != r) {
                    return Err("row counts differ".into());
                }
                let cols: usize = ts.iter().map(|t| t.cols()).sum();
                let mut vals = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for t in &ts {
                        vals.extend_from_slice(t.row(i));
                    }
                }
                Tensor::matrix(r, cols, vals).map_err(|e| e.to_string())
            }
            _ => Err(format!("unsupported concat of rank {} along axis {}", first.rank(), axis)),
        }
    }

    /// One reverse sweep from the scalar `output`; returns the gradient for each requested input.
    pub fn gradient(&self, output: Var, wrt: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let mut vars = Vec::with_capacity(wrt.len());
        for name in wrt {
            let v = *self.inputs.get(*name).ok_or_else(|| Error::Unbound((*name).to_string()))?;
            vars.push((name.to_string(), v));
        }
        let grads = self.backward(output)?;
        Ok(vars
            .into_iter()
            .map(|(name, v)| {
                let g = grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.val(v).shape().to_vec()));
                (name, g)
            })
            .collect())
    }

    /// Gradients for every bound input reachable from `output`.
    pub fn gradient_all(&self, output: Var) -> Result<BTreeMap<String, Tensor>> {
        let names: Vec<&str> = self.inputs.keys().map(String::as_str).collect();
        self.gradient(output, &names)
    }

    fn backward(&self, output: Var) -> Result<Vec<Option<Tensor>>> {
        let out = self.value(output).ok_or_else(|| Error::Op {
            op: output.0,
            kind: self.ops[output.0].kind(),
            msg: "tape has not been evaluated".into(),
        })?;
        if out.len() != 1 {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(out.shape().to_vec(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Input(_) | Op::Constant(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.val(*a), self.val(*b));
                    accumulate(&mut grads, *a, zip_with(&g, y, |p, q| p * q));
                    accumulate(&mut grads, *b, zip_with(&g, x, |p, q| p * q));
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| c * x)),
                Op::Offset(a, _) => accumulate(&mut grads, *a, g),
                Op::ScaleBy(a, s) => {
                    let c = self.val(*s).item();
                    let x = self.val(*a);
                    let gs: f64 = g.values().iter().zip(x.values()).map(|(p, q)| p * q).sum();
                    accumulate(&mut grads, *s, Tensor::filled(self.val(*s).shape().to_vec(), gs));
                    accumulate(&mut grads, *a, g.map(|x| c * x));
                }
                Op::MatVec(m, v) => {
                    let (mt, vt) = (self.val(*m), self.val(*v));
                    let (r, c) = (mt.rows(), mt.cols());
                    let gm = matmul_raw(g.values(), vt.values(), r, 1, c);
                    let gv = matmul_tn_raw(mt.values(), g.values(), r, c, 1);
                    accumulate(&mut grads, *m, Tensor::matrix(r, c, gm)?);
                    accumulate(&mut grads, *v, Tensor::vector(gv));
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (self.val(*a), self.val(*b));
                    let (m, k, n) = (x.rows(), x.cols(), y.cols());
                    let ga = matmul_nt_raw(g.values(), y.values(), m, n, k);
                    let gb = matmul_tn_raw(x.values(), g.values(), m, k, n);
                    accumulate(&mut grads, *a, Tensor::matrix(m, k, ga)?);
                    accumulate(&mut grads, *b, Tensor::matrix(k, n, gb)?);
                }
                Op::MatMulT(a, b) => {
                    let (x, y) = (self.val(*a), self.val(*b));
                    let (m, k, n) = (x.rows(), x.cols(), y.rows());
                    let ga = matmul_raw(g.values(), y.values(), m, n, k);
                    let gb = matmul_tn_raw(g.values(), x.values(), m, n, k);
                    accumulate(&mut grads, *a, Tensor::matrix(m, k, ga)?);
                    accumulate(&mut grads, *b, Tensor::matrix(n, k, gb)?);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Sum(a) => {
                    let x = self.val(*a);
                    accumulate(&mut grads, *a, Tensor::filled(x.shape().to_vec(), g.item()));
                }
                Op::SumAxis(a, axis) => {
                    let x = self.val(*a);
                    let (r, c) = (x.rows(), x.cols());
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[i * c + j] = if *axis == 0 { g.values()[j] } else { g.values()[i] };
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(r, c, out)?);
                }
                Op::Map(a, f) => {
                    let x = self.val(*a);
                    let y = self.val(Var(i));
                    let vals = g
                        .values()
                        .iter()
                        .zip(x.values().iter().zip(y.values()))
                        .map(|(gi, (xi, yi))| gi * f.derivative(*xi, *yi))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), vals)?);
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for p in parts {
                        let t = self.val(*p);
                        let extent = t.rows_for_axis(*axis);
                        let piece = slice_forward(&g, *axis, offset, extent).map_err(Error::Shape)?;
                        offset += extent;
                        accumulate(&mut grads, *p, piece);
                    }
                }
                Op::Slice(a, axis, start, len) => {
                    let x = self.val(*a);
                    let mut full = Tensor::zeros(x.shape().to_vec());
                    if x.rank() == 1 {
                        full.values_mut()[*start..start + len].copy_from_slice(g.values());
                    } else if *axis == 0 {
                        let c = x.cols();
                        full.values_mut()[start * c..(start + len) * c].copy_from_slice(g.values());
                    } else {
                        let c = x.cols();
                        for r in 0..x.rows() {
                            full.values_mut()[r * c + start..r * c + start + len]
                                .copy_from_slice(&g.values()[r * len..(r + 1) * len]);
                        }
                    }
                    accumulate(&mut grads, *a, full);
                }
                Op::Reshape(a, _) => {
                    let x = self.val(*a);
                    accumulate(&mut grads, *a, g.reshaped(x.shape().to_vec())?);
                }
                Op::LogSumExpRows(a) => {
                    let x = self.val(*a);
                    let y = self.val(Var(i));
                    let c = x.cols();
                    let mut out = vec![0.0; x.len()];
                    for r in 0..x.rows() {
                        let lse = y.values()[r];
                        let gr = g.values()[r];
                        for j in 0..c {
                            out[r * c + j] = gr * (x.values()[r * c + j] - lse).exp();
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), out)?);
                }
            }
        }
        Ok(grads)
    }
}

impl Tensor {
    fn rows_for_axis(&self, axis: usize) -> usize {
        if self.rank() == 1 {
            self.len()
        } else if axis == 0 {
            self.rows()
        } else {
            self.cols()
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.values_mut().iter_mut().zip(g.values()) {
                *e += x;
            }
        }
        slot => *slot = Some(g),
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let vals = a.values().iter().zip(b.values()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), vals).expect("operands share a shape")
}

fn slice_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> std::result::Result<Tensor, String> {
    match (x.rank(), axis) {
        (1, 0) => {
            if start + len > x.len() {
                return Err(format!("slice {}..{} out of range {}", start, start + len, x.len()));
            }
            Ok(Tensor::vector(x.values()[start..start + len].to_vec()))
        }
        (2, 0) => {
            if start + len > x.rows() {
                return Err(format!("row slice {}..{} out of range {}", start, start + len, x.rows()));
            }
            let c = x.cols();
            Tensor::matrix(len, c, x.values()[start * c..(start + len) * c].to_vec()).map_err(|e| e.to_string())
        }
        (2, 1) => {
            if start + len > x.cols() {
                return Err(format!("column slice {}..{} out of range {}", start, start + len, x.cols()));
            }
            let mut vals = Vec::with_capacity(x.rows() * len);
            for r in 0..x.rows() {
                vals.extend_from_slice(&x.row(r)[start..start + len]);
            }
            Tensor::matrix(x.rows(), len, vals).map_err(|e| e.to_string())
        }
        _ => Err(format!("cannot slice rank {} along axis {}", x.rank(), axis)),
    }
}

/// Numerically stable `log Σ exp(xs)`; `-inf` for an empty or all `-inf` slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> Bindings {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn square_and_its_derivative() {
        let mut t = Tape::new();
        let u = t.input("u");
        let y = t.mul(u, u);
        let out = t.evaluate(&bind(&[("u", Tensor::scalar(3.0))]), y).unwrap();
        assert_eq!(out.item(), 9.0);
        let g = t.gradient(y, &["u"]).unwrap();
        assert_eq!(g["u"].item(), 6.0);
    }

    #[test]
    fn identity_matvec() {
        let mut t = Tape::new();
        let m = t.input("m");
        let v = t.input("v");
        let y = t.matvec(m, v);
        let out = t
            .evaluate(&bind(&[("m", Tensor::identity(2)), ("v", Tensor::vector(vec![1.0, 2.0]))]), y)
            .unwrap();
        assert_eq!(out.values(), &[1.0, 2.0]);
    }

    #[test]
    fn leaky_relu_sum_and_slope() {
        let mut t = Tape::new();
        let v = t.input("v");
        let h = t.map(v, Unary::LeakyRelu(0.2));
        let s = t.sum(h);
        let out = t.evaluate(&bind(&[("v", Tensor::vector(vec![-1.0, 2.0]))]), s).unwrap();
        assert!((out.item() - 1.8).abs() < 1e-15);
        let g = t.gradient(s, &["v"]).unwrap();
        assert_eq!(g["v"].values(), &[0.2, 1.0]);
    }

    #[test]
    fn linear_form_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![2.0, 5.0]));
        let x = t.input("x");
        let ax = t.mul(a, x);
        let y = t.sum(ax);
        t.evaluate(&bind(&[("x", Tensor::vector(vec![0.3, -1.0]))]), y).unwrap();
        assert_eq!(t.gradient(y, &["x"]).unwrap()["x"].values(), &[2.0, 5.0]);
    }

    #[test]
    fn kink_uses_right_branch() {
        assert_eq!(Unary::LeakyRelu(0.2).derivative(0.0, 0.0), 1.0);
        assert_eq!(Unary::LeakyRelu(0.2).derivative(-1.0, -0.2), 0.2);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut t = Tape::new();
        let a = t.input("a");
        let b = t.input("b");
        let y = t.matmul(a, b);
        let e = t
            .evaluate(
                &bind(&[("a", Tensor::zeros(vec![2, 3])), ("b", Tensor::zeros(vec![2, 3]))]),
                y,
            )
            .unwrap_err();
        match e {
            Error::Op { op, kind, .. } => {
                assert_eq!(op, 2);
                assert_eq!(kind, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_scalar_output_and_unbound_input_are_errors() {
        let mut t = Tape::new();
        let a = t.input("a");
        let y = t.scale(a, 2.0);
        assert!(matches!(t.evaluate(&Bindings::new(), y), Err(Error::Unbound(_))));
        t.evaluate(&bind(&[("a", Tensor::vector(vec![1.0, 2.0]))]), y).unwrap();
        assert!(matches!(t.gradient(y, &["a"]), Err(Error::NonScalarOutput(_))));
        let s = t.sum(y);
        t.evaluate(&bind(&[("a", Tensor::vector(vec![1.0, 2.0]))]), s).unwrap();
        assert!(matches!(t.gradient(s, &["nope"]), Err(Error::Unbound(_))));
    }

    #[test]
    fn log_of_zero_reports_row() {
        let mut t = Tape::new();
        let a = t.input("a");
        let y = t.log(a);
        let e = t
            .evaluate(&bind(&[("a", Tensor::matrix(3, 1, vec![1.0, 2.0, 0.0]).unwrap())]), y)
            .unwrap_err();
        assert!(matches!(e, Error::NonFinite { row: 2, .. }));
    }

    #[test]
    fn concat_slice_logsumexp_backward() {
        let mut t = Tape::new();
        let a = t.input("a");
        let b = t.input("b");
        let c = t.concat(&[a, b], 1);
        let s = t.slice(c, 1, 1, 2);
        let l = t.logsumexp_rows(s);
        let y = t.sum(l);
        let inputs = bind(&[
            ("a", Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap()),
            ("b", Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap()),
        ]);
        t.evaluate(&inputs, y).unwrap();
        let g = t.gradient(y, &["a", "b"]).unwrap();
        // softmax over (a_i1, b_i)
        let p0 = (0.2f64).exp() / ((0.2f64).exp() + 1f64.exp());
        let p1 = (0.4f64).exp() / ((0.4f64).exp() + (-1f64).exp());
        assert!((g["a"].values()[1] - p0).abs() < 1e-15);
        assert!((g["a"].values()[3] - p1).abs() < 1e-15);
        assert_eq!(g["a"].values()[0], 0.0);
        assert!((g["b"].values()[0] - (1.0 - p0)).abs() < 1e-15);
    }
}

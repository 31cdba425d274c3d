//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`]; node order is a
//! topological order, so [`Tape::backward`] walks the nodes once in reverse.
//! Broadcasting is limited to a single-element operand in binary ops, plus
//! the explicit row-wise forms ([`Tape::linear`], [`Tape::scale_rows`]) the
//! model needs.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Square,
    Sqrt,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    ScaleRows { x: Var, w: Var },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of a computation.
///
/// A tape is confined to one thread. Independent rollouts use independent
/// tapes.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| (i != axis).then_some(d))
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            check_finite: false,
        }
    }

    /// A tape that evaluates forward only; `backward` is rejected.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    /// Turns on NaN/Inf detection after every operation.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = self.recording
            && match &op {
                Op::Leaf { requires_grad } => *requires_grad,
                Op::Unary(_, a) | Op::Scale(a, _) | Op::AddScalar(a) => self.needs(*a),
                Op::Binary(_, a, b) | Op::MatMul(a, b) => self.needs(*a) || self.needs(*b),
                Op::Linear { x, w, b } => self.needs(*x) || self.needs(*w) || self.needs(*b),
                Op::ScaleRows { x, w } => self.needs(*x) || self.needs(*w),
                Op::Sum { x, .. } | Op::Mean { x, .. } | Op::Slice { x, .. } => self.needs(*x),
                Op::Concat { parts, .. } => parts.iter().any(|p| self.needs(*p)),
            };
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf { requires_grad: true },
            needs_grad: self.recording,
            value: t,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf { requires_grad: false },
            needs_grad: false,
            value: t,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(Tensor::new(t.shape().to_vec(), t.into_data()).expect("shape preserved"))
    }

    pub fn unary(&mut self, f: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let name = match f {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Neg => "negate",
        };
        match f {
            Unary::Log => {
                if let Some(&bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain { op: name, value: bad });
                }
            }
            Unary::Sqrt => {
                if let Some(&bad) = x.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
                    return Err(Error::Domain { op: name, value: bad });
                }
            }
            _ => {}
        }
        let data: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| match f {
                Unary::Tanh => v.tanh(),
                Unary::Sigmoid => sigmoid(v),
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::Square => v * v,
                Unary::Sqrt => v.sqrt(),
                Unary::Neg => -v,
            })
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(Op::Unary(f, a), out, name)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn binary(&mut self, f: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match f {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (x, y) = (self.value(a), self.value(b));
        let apply = |p: f64, q: f64| match f {
            Binary::Add => p + q,
            Binary::Sub => p - q,
            Binary::Mul => p * q,
        };
        let out = if x.shape() == y.shape() {
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| apply(p, q)).collect();
            Tensor::new(x.shape().to_vec(), data)?
        } else if y.numel() == 1 {
            let q = y.data()[0];
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&p| apply(p, q)).collect())?
        } else if x.numel() == 1 {
            let p = x.data()[0];
            Tensor::new(y.shape().to_vec(), y.data().iter().map(|&q| apply(p, q)).collect())?
        } else {
            return Err(Error::Shape {
                op: name,
                expected: x.shape().to_vec(),
                got: y.shape().to_vec(),
            });
        };
        self.push(Op::Binary(f, a, b), out, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())?;
        self.push(Op::Scale(a, c), out, "scale")
    }

    /// `a + c` for a constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect())?;
        self.push(Op::AddScalar(a), out, "add_scalar")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                expected: vec![k, n],
                got: vec![k2, n],
            });
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = x[i * k + p];
                let brow = &y[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, &v)| *o += s * v);
            }
        }
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?, "matmul")
    }

    /// `x · wᵀ + b` with `x: [m×k]`, `w: [n×k]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(x).dims2("linear")?;
        let (n, k2) = self.value(w).dims2("linear")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "linear",
                expected: vec![n, k],
                got: vec![n, k2],
            });
        }
        if self.value(b).shape() != [n] {
            return Err(Error::Shape {
                op: "linear",
                expected: vec![n],
                got: self.value(b).shape().to_vec(),
            });
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xr = &xd[i * k..(i + 1) * k];
            for o in 0..n {
                let wr = &wd[o * k..(o + 1) * k];
                out[i * n + o] = bd[o] + dot(xr, wr);
            }
        }
        self.push(Op::Linear { x, w, b }, Tensor::matrix(m, n, out)?, "linear")
    }

    /// Scales row `i` of `x: [m×n]` by `w[i]`, with `w: [m]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("scale_rows")?;
        if self.value(w).shape() != [m] {
            return Err(Error::Shape {
                op: "scale_rows",
                expected: vec![m],
                got: self.value(w).shape().to_vec(),
            });
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let out = (0..m * n).map(|i| xd[i] * wd[i / n]).collect();
        self.push(Op::ScaleRows { x, w }, Tensor::matrix(m, n, out)?, "scale_rows")
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: Option<usize>) -> Result<()> {
        let rank = self.value(v).rank();
        match axis {
            Some(a) if a >= rank => Err(Error::Axis { op, axis: a, rank }),
            _ => Ok(()),
        }
    }

    fn reduce_sum(&self, v: Var, axis: Option<usize>) -> Tensor {
        let x = self.value(v);
        match axis {
            None => Tensor::scalar(x.data().iter().sum()),
            Some(a) => {
                let (outer, n, inner) = split_axis(x.shape(), a);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &x.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                        out[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
                Tensor::new(reduced_shape(x.shape(), a), out).expect("reduced shape")
            }
        }
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis("sum", x, axis)?;
        let out = self.reduce_sum(x, axis);
        self.push(Op::Sum { x, axis }, out, "sum")
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let count = match axis {
            None => self.value(x).numel(),
            Some(a) => self.value(x).shape()[a],
        } as f64;
        let mut out = self.reduce_sum(x, axis);
        out.data_mut().iter_mut().for_each(|v| *v /= count);
        self.push(Op::Mean { x, axis }, out, "mean")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    expected: base,
                    got: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            out,
            "concat",
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if range.start > range.end || range.end > shape[axis] {
            return Err(Error::Range {
                op: "slice",
                start: range.start,
                end: range.end,
                extent: shape[axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let len = range.end - range.start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + range.start) * inner..(o * n + range.end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let out = Tensor::new(new_shape, out)?;
        self.push(
            Op::Slice {
                x,
                axis,
                start: range.start,
            },
            out,
            "slice",
        )
    }

    /// Back-propagates from a scalar `loss`, accumulating into every leaf
    /// created with [`Tape::leaf`]. Calling it twice without
    /// [`Tape::zero_grads`] adds the gradients twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::NotRecording);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {
                    self.nodes[i].value.accumulate_grad(&g);
                }
                Op::Unary(f, a) => {
                    let y = node.value.data();
                    let x = self.nodes[a.0].value.data();
                    let dx: Vec<f64> = match f {
                        Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                        Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                        Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                        Unary::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                        Unary::Square => g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect(),
                        // Subgradient 0 at the origin.
                        Unary::Sqrt => g
                            .iter()
                            .zip(y)
                            .map(|(g, y)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 })
                            .collect(),
                        Unary::Neg => g.iter().map(|g| -g).collect(),
                    };
                    let a = *a;
                    accumulate(&mut grads, &self.nodes, a, dx);
                }
                Op::Binary(f, a, b) => {
                    let (a, b, f) = (*a, *b, *f);
                    let xa = self.nodes[a.0].value.data();
                    let xb = self.nodes[b.0].value.data();
                    let n = g.len();
                    let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                    let da: Vec<f64> = match f {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => (0..n).map(|i| g[i] * at(xb, i)).collect(),
                    };
                    let db: Vec<f64> = match f {
                        Binary::Add => g.clone(),
                        Binary::Sub => g.iter().map(|v| -v).collect(),
                        Binary::Mul => (0..n).map(|i| g[i] * at(xa, i)).collect(),
                    };
                    let fold = |d: Vec<f64>, len: usize| {
                        if len == 1 && d.len() != 1 {
                            vec![d.iter().sum()]
                        } else {
                            d
                        }
                    };
                    let (la, lb) = (xa.len(), xb.len());
                    accumulate(&mut grads, &self.nodes, a, fold(da, la));
                    accumulate(&mut grads, &self.nodes, b, fold(db, lb));
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    accumulate(&mut grads, &self.nodes, a, g.iter().map(|v| v * c).collect());
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    accumulate(&mut grads, &self.nodes, a, g);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.nodes[a.0].value.dims2("matmul")?;
                    let n = self.nodes[b.0].value.shape()[1];
                    let (xa, xb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] = dot(gr, &xb[p * n..(p + 1) * n]);
                            let s = xa[i * k + p];
                            db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(d, &v)| *d += s * v);
                        }
                    }
                    accumulate(&mut grads, &self.nodes, a, da);
                    accumulate(&mut grads, &self.nodes, b, db);
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (m, k) = self.nodes[x.0].value.dims2("linear")?;
                    let n = self.nodes[w.0].value.shape()[0];
                    let (xd, wd) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![0.0; m * k];
                        for i in 0..m {
                            let row = &mut dx[i * k..(i + 1) * k];
                            for o in 0..n {
                                let s = g[i * n + o];
                                if s != 0.0 {
                                    axpy(row, s, &wd[o * k..(o + 1) * k]);
                                }
                            }
                        }
                        accumulate(&mut grads, &self.nodes, x, dx);
                    }
                    if self.nodes[w.0].needs_grad {
                        let mut dw = vec![0.0; n * k];
                        for i in 0..m {
                            let xr = &xd[i * k..(i + 1) * k];
                            for o in 0..n {
                                let s = g[i * n + o];
                                if s != 0.0 {
                                    axpy(&mut dw[o * k..(o + 1) * k], s, xr);
                                }
                            }
                        }
                        accumulate(&mut grads, &self.nodes, w, dw);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            axpy(&mut db, 1.0, &g[i * n..(i + 1) * n]);
                        }
                        accumulate(&mut grads, &self.nodes, b, db);
                    }
                }
                Op::ScaleRows { x, w } => {
                    let (x, w) = (*x, *w);
                    let (m, n) = self.nodes[x.0].value.dims2("scale_rows")?;
                    let (xd, wd) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
                    let dx = (0..m * n).map(|i| g[i] * wd[i / n]).collect();
                    let dw = (0..m)
                        .map(|r| dot(&g[r * n..(r + 1) * n], &xd[r * n..(r + 1) * n]))
                        .collect();
                    accumulate(&mut grads, &self.nodes, x, dx);
                    accumulate(&mut grads, &self.nodes, w, dw);
                }
                Op::Sum { x, axis } | Op::Mean { x, axis } => {
                    let (x, axis) = (*x, *axis);
                    let is_mean = matches!(node.op, Op::Mean { .. });
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let numel: usize = shape.iter().product();
                    let dx = match axis {
                        None => {
                            let s = if is_mean { g[0] / numel as f64 } else { g[0] };
                            vec![s; numel]
                        }
                        Some(a) => {
                            let (outer, n, inner) = split_axis(&shape, a);
                            let div = if is_mean { n as f64 } else { 1.0 };
                            let mut dx = vec![0.0; numel];
                            for o in 0..outer {
                                for j in 0..n {
                                    for q in 0..inner {
                                        dx[(o * n + j) * inner + q] = g[o * inner + q] / div;
                                    }
                                }
                            }
                            dx
                        }
                    };
                    accumulate(&mut grads, &self.nodes, x, dx);
                }
                Op::Concat { parts, axis } => {
                    let axis = *axis;
                    let (outer, total, inner) = split_axis(node.value.shape(), axis);
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.shape()[axis];
                        if self.nodes[p.0].needs_grad {
                            let mut dp = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let start = (o * total + offset) * inner;
                                dp.extend_from_slice(&g[start..start + len * inner]);
                            }
                            accumulate(&mut grads, &self.nodes, p, dp);
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let (x, axis, start) = (*x, *axis, *start);
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let (outer, n, inner) = split_axis(&shape, axis);
                    let len = node.value.shape()[axis];
                    let mut dx = vec![0.0; shape.iter().product()];
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut grads, &self.nodes, x, dx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: Vec<f64>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central differences of `f` around `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.data(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = t(&[1, 2], &[1.0, 1.0]);
        let b0 = t(&[2, 1], &[2.0, 5.0]);
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.constant(b0.clone());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c, None).unwrap();
        tape.backward(s).unwrap();
        let analytic = tape.grad(a).unwrap().to_vec();

        let numeric = numeric_grad(&a0, |x| {
            let mut tp = Tape::no_grad();
            let a = tp.constant(x.clone());
            let b = tp.constant(b0.clone());
            let c = tp.matmul(a, b).unwrap();
            let s = tp.sum(c, None).unwrap();
            tp.item(s).unwrap()
        });
        // Frozen from the central-difference oracle above.
        let expected = [2.0, 5.0];
        for i in 0..2 {
            assert!((numeric[i] - expected[i]).abs() < 1e-8);
            assert!((analytic[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let th = tape.tanh(z).unwrap();
        let sg = tape.sigmoid(z).unwrap();
        assert_eq!(tape.item(th).unwrap(), 0.0);
        assert_eq!(tape.item(sg).unwrap(), 0.5);
    }

    #[test]
    fn tanh_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.7));
        let y = tape.tanh(x).unwrap();
        tape.backward(y).unwrap();
        let expected = 1.0 - 0.7f64.tanh().powi(2);
        let h = 1e-5;
        let numeric = ((0.7f64 + h).tanh() - (0.7f64 - h).tanh()) / (2.0 * h);
        assert!((numeric - expected).abs() < 1e-9);
        assert!((tape.grad(x).unwrap()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn log_and_sqrt_domain() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
        let y = tape.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(tape.sqrt(y), Err(Error::Domain { .. })));
        // sqrt(0) is defined and has subgradient zero.
        let z = tape.leaf(t(&[1], &[0.0]));
        let s = tape.sqrt(z).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[0.0]);
    }

    #[test]
    fn binary_shape_mismatch_and_scalar_broadcast() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(tape.add(a, b).is_err());
        let s = tape.leaf(Tensor::scalar(2.0));
        let p = tape.mul(a, s).unwrap();
        assert_eq!(tape.data(p), &[2.0, 4.0, 6.0]);
        let l = tape.sum(p, None).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[6.0]);
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x, None).unwrap();
        assert_eq!(tape.item(s).unwrap(), 6.0);
        let y = tape.constant(t(&[2], &[2.0, 4.0]));
        let m = tape.mean(y, None).unwrap();
        assert_eq!(tape.item(m).unwrap(), 3.0);

        let w = tape.leaf(t(&[4], &[1.0, -2.0, 3.0, 9.0]));
        let m = tape.mean(w, None).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.25; 4]);

        let bad = tape.sum(w, Some(1));
        assert!(matches!(bad, Err(Error::Axis { .. })));
    }

    #[test]
    fn axis_reductions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = tape.sum(x, Some(1)).unwrap();
        assert_eq!(tape.data(r), &[6.0, 15.0]);
        let c = tape.mean(x, Some(0)).unwrap();
        assert_eq!(tape.data(c), &[2.5, 3.5, 4.5]);
    }

    #[test]
    fn concat_and_slice() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1], &[3.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0]);
        let s = tape.slice(c, 0, 1..3).unwrap();
        assert_eq!(tape.data(s), &[2.0, 3.0]);
        let back = tape.slice(c, 0, 2..3).unwrap();
        assert_eq!(tape.data(back), tape.data(b));
        assert!(matches!(tape.slice(c, 0, 2..4), Err(Error::Range { .. })));
        let bad = tape.constant(Tensor::zeros([2, 2]));
        assert!(matches!(tape.concat(&[a, bad], 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_columns_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.data(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.mul(c, w).unwrap();
        let l = tape.sum(p, None).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
        tape.zero_grads();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        // loss = sum(W·v): dL/dW[o][k] = v[k] for every row o.
        let v = [0.5, -1.5, 2.0];
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let b = tape.constant(Tensor::zeros([2]));
        let x = tape.constant(t(&[1, 3], &v));
        let y = tape.linear(x, w, b).unwrap();
        let l = tape.sum(y, None).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.5, -1.5, 2.0, 0.5, -1.5, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let mut frozen = Tape::no_grad();
        let y = frozen.leaf(Tensor::scalar(1.0));
        assert!(matches!(frozen.backward(y), Err(Error::NotRecording)));
    }

    #[test]
    fn finite_checks_catch_overflow() {
        let mut tape = Tape::new().with_finite_checks(true);
        let x = tape.constant(Tensor::scalar(1e6));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
        let mut lax = Tape::new();
        let x = lax.constant(Tensor::scalar(1e6));
        assert!(lax.exp(x).is_ok());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.square(x).unwrap();
        let d = tape.detach(y);
        let z = tape.mul(d, x).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }
}

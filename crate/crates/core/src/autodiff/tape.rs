//! Reverse-mode tape. Nodes are appended in evaluation order, so the node
//! list is already a topological order and backward is a single reverse
//! sweep.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Log,
    Exp,
    Pow(f64),
    Affine(f64, f64),
    Clamp(f64, f64),
    SmoothL1(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Gather(Var, Arc<[usize]>),
    /// Column-wise max inside consecutive row groups; holds the winning
    /// source row for every output element.
    SegmentMax(Var, Vec<usize>),
    BroadcastRows(Var),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }),
    }
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> usize {
    let rr = if t.rows() == 1 { 0 } else { r };
    let cc = if t.cols() == 1 { 0 } else { c };
    rr * t.cols() + cc
}

fn sigmoid(x: f64) -> f64 {
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
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copies a value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape(name, ta, tb)?;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = ta.data()[bidx(ta, i, j)];
                let y = tb.data()[bidx(tb, i, j)];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                    Binary::Min => {
                        if y < x {
                            y
                        } else {
                            x
                        }
                    }
                    Binary::Max => {
                        if y > x {
                            y
                        } else {
                            x
                        }
                    }
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Binary(kind, a, b), rg))
    }

    /// Elementwise sum; either operand may broadcast along rows or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, "minimum", a, b)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, "maximum", a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f = |x: f64| match kind {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Pow(p) => x.powf(p),
            Unary::Affine(s, o) => s * x + o,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::SmoothL1(beta) => {
                if x.abs() < beta {
                    0.5 * x * x / beta
                } else {
                    x.abs() - 0.5 * beta
                }
            }
        };
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, Op::Unary(kind, a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(Unary::Pow(p), a)
    }

    /// `scale * a + offset`.
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        self.unary(Unary::Affine(scale, offset), a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Gradient passes only where the input lies inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    pub fn smooth_l1(&mut self, a: Var, beta: f64) -> Var {
        self.unary(Unary::SmoothL1(beta), a)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|o| *o /= z);
        }
        let rg = self.rg(a);
        let value = Tensor::matrix(r, c, out).expect("softmax shape");
        self.push(value, Op::Softmax(a), rg)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(Error::Shape {
                op: "concat",
                lhs: self.shape(parts[0]).to_vec(),
                rhs: self.shape(*bad).to_vec(),
            });
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(rows, total, out)?,
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Row gather; indices may repeat, gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(t.row_slice(i));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(idx.len(), c, out)?, Op::Gather(a, idx), rg))
    }

    /// Column-wise max over each run of `group` consecutive rows.
    /// Ties go to the lowest row.
    pub fn segment_max(&mut self, a: Var, group: usize) -> Result<Var> {
        let t = self.value(a);
        if group == 0 || t.rows() % group != 0 {
            return Err(Error::Shape {
                op: "segment_max",
                lhs: t.shape().to_vec(),
                rhs: vec![group],
            });
        }
        let (groups, c) = (t.rows() / group, t.cols());
        let mut out = vec![f64::NEG_INFINITY; groups * c];
        let mut arg = vec![0usize; groups * c];
        for g in 0..groups {
            for r in g * group..(g + 1) * group {
                let row = t.row_slice(r);
                for j in 0..c {
                    if row[j] > out[g * c + j] {
                        out[g * c + j] = row[j];
                        arg[g * c + j] = r;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(groups, c, out)?, Op::SegmentMax(a, arg), rg))
    }

    /// Max over the point (row) axis, producing a `[1, c]` row.
    pub fn max_over_points(&mut self, a: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        self.segment_max(a, rows)
    }

    /// Repeats a `[1, c]` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![1, t.cols()],
            });
        }
        let mut out = Vec::with_capacity(n * t.cols());
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let c = t.cols();
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::BroadcastRows(a), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start >= end || end > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let mut out = Vec::with_capacity(t.rows() * (end - start));
        for i in 0..t.rows() {
            out.extend_from_slice(&t.row_slice(i)[start..end]);
        }
        let rows = t.rows();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(rows, end - start, out)?,
            Op::SliceCols(a, start),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Affine map `x · w + b` with a `[1, out]` bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    /// Reverse sweep from a scalar `root`, seeded with 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: rv.shape().to_vec(),
                rhs: vec![1, 1],
            });
        }
        if !rv.is_finite() {
            return Err(Error::NonFinite("backward root".to_string()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(1, 1, 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(&tb.transpose())?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, ta.transpose().matmul(g)?);
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                let (r, c) = (out.rows(), out.cols());
                for i in 0..r {
                    for j in 0..c {
                        let up = g.data()[i * c + j];
                        let (ia, ib) = (bidx(ta, i, j), bidx(tb, i, j));
                        let (x, y) = (ta.data()[ia], tb.data()[ib]);
                        let (da, db) = match kind {
                            Binary::Add => (up, up),
                            Binary::Sub => (up, -up),
                            Binary::Mul => (up * y, up * x),
                            Binary::Div => (up / y, -up * x / (y * y)),
                            Binary::Min => {
                                if y < x {
                                    (0.0, up)
                                } else {
                                    (up, 0.0)
                                }
                            }
                            Binary::Max => {
                                if y > x {
                                    (0.0, up)
                                } else {
                                    (up, 0.0)
                                }
                            }
                        };
                        ga.data_mut()[ia] += da;
                        gb.data_mut()[ib] += db;
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let mut ga = Vec::with_capacity(x.len());
                for ((&xv, &yv), &up) in x.data().iter().zip(out.data()).zip(g.data()) {
                    let d = match *kind {
                        Unary::Relu => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Sigmoid => yv * (1.0 - yv),
                        Unary::Log => 1.0 / xv,
                        Unary::Exp => yv,
                        Unary::Pow(p) => {
                            if p == 0.0 {
                                0.0
                            } else {
                                p * xv.powf(p - 1.0)
                            }
                        }
                        Unary::Affine(s, _) => s,
                        Unary::Clamp(lo, hi) => {
                            if xv >= lo && xv <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::SmoothL1(beta) => {
                            if xv.abs() < beta {
                                xv / beta
                            } else {
                                xv.signum()
                            }
                        }
                    };
                    ga.push(up * d);
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), ga)?);
            }
            Op::Softmax(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let y = out.row_slice(i);
                    let up = g.row_slice(i);
                    let dot: f64 = y.iter().zip(up).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = y[j] * (up[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, ga)?);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let (r, total) = (out.rows(), out.cols());
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(r, w, gp)?);
                    }
                    offset += w;
                }
            }
            Op::Gather(a, idx) => {
                let t = self.value(*a);
                let c = t.cols();
                let mut ga = Tensor::zeros(t.rows(), c);
                for (k, &i) in idx.iter().enumerate() {
                    let src = &g.data()[k * c..(k + 1) * c];
                    for (d, s) in ga.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SegmentMax(a, arg) => {
                let t = self.value(*a);
                let c = t.cols();
                let mut ga = Tensor::zeros(t.rows(), c);
                for (k, &src_row) in arg.iter().enumerate() {
                    ga.data_mut()[src_row * c + k % c] += g.data()[k];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::BroadcastRows(a) => {
                let c = out.cols();
                let mut ga = vec![0.0; c];
                for i in 0..out.rows() {
                    for (d, s) in ga.iter_mut().zip(g.row_slice(i)) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, Tensor::row(ga));
            }
            Op::SliceCols(a, start) => {
                let t = self.value(*a);
                let (r, c, w) = (t.rows(), t.cols(), out.cols());
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                let ga = Tensor::new(t.shape().to_vec(), vec![g.item(); t.len()])?;
                self.accumulate(grads, *a, ga);
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = g.item() / t.len() as f64;
                let ga = Tensor::new(t.shape().to_vec(), vec![v; t.len()])?;
                self.accumulate(grads, *a, ga);
            }
        }
        Ok(())
    }
}

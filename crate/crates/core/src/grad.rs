//! Reverse-mode differentiation over [`NumArray`] values.
//!
//! A [`Tape`] records every operation in execution order, so parents always
//! precede children. [`Tape::backward`] walks the record in reverse and
//! accumulates vector-Jacobian products into per-node gradient buffers.
//! The tape is not consumed, so backward can be replayed.

use crate::array::{self, NumArray};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Entry-wise operation tags.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Silu,
    Exp,
    Log,
    Softplus,
    Scale(f64),
    AddConst(f64),
}

impl ElemOp {
    fn is_binary(self) -> bool {
        matches!(self, ElemOp::Add | ElemOp::Sub | ElemOp::Mul)
    }

    fn unary(self, x: f64) -> f64 {
        match self {
            ElemOp::Sigmoid => array::sigmoid(x),
            ElemOp::Tanh => x.tanh(),
            ElemOp::Silu => array::silu(x),
            ElemOp::Exp => x.exp(),
            ElemOp::Log => x.ln(),
            ElemOp::Softplus => array::softplus(x),
            ElemOp::Scale(c) => c * x,
            ElemOp::AddConst(c) => x + c,
            ElemOp::Add | ElemOp::Sub | ElemOp::Mul => unreachable!("binary op"),
        }
    }

    fn binary(self, a: f64, b: f64) -> f64 {
        match self {
            ElemOp::Add => a + b,
            ElemOp::Sub => a - b,
            ElemOp::Mul => a * b,
            _ => unreachable!("unary op"),
        }
    }
}

/// Plain entry-wise evaluation with scalar broadcast for binary ops.
pub fn elementwise(op: ElemOp, a: &NumArray, b: Option<&NumArray>) -> Result<NumArray> {
    if op.is_binary() {
        let b = b.ok_or_else(|| Error::Invalid(format!("{op:?} needs two operands")))?;
        let shape = broadcast_shape("elementwise", a, b)?;
        let n = shape.iter().product::<usize>();
        let data = (0..n)
            .map(|i| op.binary(bcast(a, i), bcast(b, i)))
            .collect();
        return Ok(NumArray::from_parts(shape, data));
    }
    if let ElemOp::Log = op {
        if let Some((index, &value)) = a.data().iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(Error::NonPositiveLog { index, value });
        }
    }
    Ok(a.map(|x| op.unary(x)))
}

fn bcast(a: &NumArray, i: usize) -> f64 {
    if a.is_scalar() {
        a.data()[0]
    } else {
        a.data()[i]
    }
}

fn broadcast_shape(op: &'static str, a: &NumArray, b: &NumArray) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() })
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Elem(ElemOp, Var, Option<Var>),
    MatMul(Var, Var),
    Reshape(Var),
    Sum(Var),
    AddRow(Var, Var),
    Slice { src: Var, r0: usize, c0: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterGrid { z: Var, pad: Var, cells: Vec<usize> },
    DwConv2d { grid: Var, kernels: Var, pad: Var, height: usize, width: usize, kh: usize, kw: usize },
    CausalConv1d { x: Var, kernel: Var, width: usize },
    RmsNorm { x: Var, gain: Var, eps: f64 },
    L2NormGroups { x: Var, group: usize, eps: f64 },
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, label: usize },
}

struct Node {
    value: NumArray,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that only evaluates; [`Tape::backward`] will fail.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NumArray {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Learnable input.
    pub fn leaf(&mut self, value: NumArray) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: NumArray) -> Var {
        self.push(value, Op::Const, false)
    }

    fn push(&mut self, value: NumArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: NumArray, op: Op, parents: &[Var]) -> Var {
        let rg = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn elementwise(&mut self, op: ElemOp, a: Var, b: Option<Var>) -> Result<Var> {
        let value = elementwise(op, self.value(a), b.map(|b| self.value(b)))?;
        let parents: Vec<Var> = std::iter::once(a).chain(b).collect();
        Ok(self.push_op(value, Op::Elem(op, a, b), &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemOp::Mul, a, Some(b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(ElemOp::Scale(c), a)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(ElemOp::AddConst(c), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(ElemOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(ElemOp::Tanh, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(ElemOp::Silu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(ElemOp::Exp, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(ElemOp::Softplus, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElemOp::Log, a, None)
    }

    fn unary(&mut self, op: ElemOp, a: Var) -> Var {
        let value = self.value(a).map(|x| op.unary(x));
        self.push_op(value, Op::Elem(op, a, None), &[a])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_const(neg, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push_op(value, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = NumArray::scalar(self.value(a).sum());
        self.push_op(value, Op::Sum(a), &[a])
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.cols() != bv.len() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        let b = bv.data().to_vec();
        for r in 0..out.rows() {
            out.row_mut(r).iter_mut().zip(&b).for_each(|(o, b)| *o += b);
        }
        Ok(self.push_op(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x·w + b` for `x[m×k]`, `w[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Block `[r0..r0+nr, c0..c0+nc]` of a 2-D view.
    pub fn slice(&mut self, src: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var> {
        let sv = self.value(src);
        let (rows, cols) = (sv.rows(), sv.cols());
        if r0 + nr > rows || c0 + nc > cols {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: sv.shape().to_vec(),
                right: vec![r0 + nr, c0 + nc],
            });
        }
        let mut data = Vec::with_capacity(nr * nc);
        for r in r0..r0 + nr {
            data.extend_from_slice(&sv.data()[r * cols + c0..r * cols + c0 + nc]);
        }
        let value = NumArray::from_parts(vec![nr, nc], data);
        Ok(self.push_op(value, Op::Slice { src, r0, c0 }, &[src]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = NumArray::from_parts(vec![rows, cols], data);
        Ok(self.push_op(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = NumArray::from_parts(vec![rows, total], data);
        Ok(self.push_op(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let cols = sv.cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= sv.rows()) {
            return Err(Error::ShapeMismatch { op: "gather_rows", left: sv.shape().to_vec(), right: vec![bad] });
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(sv.row(i));
        }
        let value = NumArray::from_parts(vec![indices.len(), cols], data);
        Ok(self.push_op(value, Op::GatherRows(src, indices.to_vec()), &[src]))
    }

    /// Place row `i` of `z` at grid cell `cells[i]`; every other one of the
    /// `n_cells` cells holds `pad`. Output is `n_cells × d`.
    pub fn scatter_grid(&mut self, z: Var, pad: Var, cells: &[usize], n_cells: usize) -> Result<Var> {
        let (zv, pv) = (self.value(z), self.value(pad));
        let d = zv.cols();
        if pv.len() != d || cells.len() != zv.rows() {
            return Err(Error::ShapeMismatch { op: "scatter_grid", left: zv.shape().to_vec(), right: pv.shape().to_vec() });
        }
        let mut data = Vec::with_capacity(n_cells * d);
        for _ in 0..n_cells {
            data.extend_from_slice(pv.data());
        }
        for (i, &cell) in cells.iter().enumerate() {
            data[cell * d..(cell + 1) * d].copy_from_slice(zv.row(i));
        }
        let value = NumArray::from_parts(vec![n_cells, d], data);
        Ok(self.push_op(value, Op::ScatterGrid { z, pad, cells: cells.to_vec() }, &[z, pad]))
    }

    /// Depthwise same-size correlation of a `(height·width) × d` grid with
    /// `d × kh × kw` kernels; out-of-grid taps read `pad`.
    pub fn dwconv2d(&mut self, grid: Var, kernels: Var, pad: Var, height: usize, width: usize) -> Result<Var> {
        let (gv, kv, pv) = (self.value(grid), self.value(kernels), self.value(pad));
        let d = gv.cols();
        let ks = kv.shape();
        if ks.len() != 3 || ks[0] != d || gv.rows() != height * width || pv.len() != d {
            return Err(Error::ShapeMismatch { op: "dwconv2d", left: gv.shape().to_vec(), right: ks.to_vec() });
        }
        let (kh, kw) = (ks[1], ks[2]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::EvenKernel { kh, kw });
        }
        let out = array::dwconv2d_forward(gv.data(), height, width, d, kv.data(), kh, kw, pv.data());
        let value = NumArray::from_parts(vec![height * width, d], out);
        Ok(self.push_op(value, Op::DwConv2d { grid, kernels, pad, height, width, kh, kw }, &[grid, kernels, pad]))
    }

    /// Depthwise causal convolution along rows of `x[n×d]` with `kernel[d×w]`.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let d = xv.cols();
        if kv.rows() != d || kv.shape().len() != 2 {
            return Err(Error::ShapeMismatch { op: "causal_conv1d", left: xv.shape().to_vec(), right: kv.shape().to_vec() });
        }
        let width = kv.cols();
        let out = array::causal_conv1d_forward(xv.data(), xv.rows(), d, kv.data(), width);
        let value = NumArray::from_parts(vec![xv.rows(), d], out);
        Ok(self.push_op(value, Op::CausalConv1d { x, kernel, width }, &[x, kernel]))
    }

    /// Per-row `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.cols();
        if gv.len() != d {
            return Err(Error::ShapeMismatch { op: "rms_norm", left: xv.shape().to_vec(), right: gv.shape().to_vec() });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps).sqrt();
            row.iter_mut().zip(gv.data()).for_each(|(v, g)| *v = *v * inv * g);
        }
        Ok(self.push_op(out, Op::RmsNorm { x, gain, eps }, &[x, gain]))
    }

    /// Divide every contiguous `group`-wide segment of each row by
    /// `sqrt(‖segment‖² + eps)`.
    pub fn l2_normalize_groups(&mut self, x: Var, group: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || !xv.cols().is_multiple_of(group) {
            return Err(Error::ShapeMismatch { op: "l2_normalize_groups", left: xv.shape().to_vec(), right: vec![group] });
        }
        let mut out = xv.clone();
        for seg in out.data_mut().chunks_mut(group) {
            let inv = 1.0 / (seg.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            seg.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push_op(out, Op::L2NormGroups { x, group, eps }, &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let sm = array::softmax(out.row(r));
            out.row_mut(r).copy_from_slice(&sm);
        }
        self.push_op(out, Op::SoftmaxRows(x), &[x])
    }

    /// `-log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if label >= lv.len() {
            return Err(Error::InvalidClass { class: label, n_classes: lv.len() });
        }
        let max = lv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let value = NumArray::scalar(lse - lv.data()[label]);
        Ok(self.push_op(value, Op::CrossEntropy { logits, label }, &[logits]))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::GradDisabled);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| match (&n.op, g) {
                    (Op::Leaf, Some(g)) => Some(NumArray::from_parts(n.value.shape().to_vec(), g)),
                    _ => None,
                })
                .collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Elem(op, a, b) => {
                let av = self.value(*a);
                match (op, b) {
                    (ElemOp::Add | ElemOp::Sub | ElemOp::Mul, Some(b)) => {
                        let bv = self.value(*b);
                        let sign = if let ElemOp::Sub = op { -1.0 } else { 1.0 };
                        if let Some(ga) = self.acc(grads, *a) {
                            for i in 0..g.len() {
                                let local = if let ElemOp::Mul = op { bcast(bv, i) } else { 1.0 };
                                let slot = if av.is_scalar() { 0 } else { i };
                                ga[slot] += g[i] * local;
                            }
                        }
                        if let Some(gb) = self.acc(grads, *b) {
                            for i in 0..g.len() {
                                let local = if let ElemOp::Mul = op { bcast(av, i) } else { sign };
                                let slot = if bv.is_scalar() { 0 } else { i };
                                gb[slot] += g[i] * local;
                            }
                        }
                    }
                    (op, _) => {
                        let x = av.data().to_vec();
                        if let Some(ga) = self.acc(grads, *a) {
                            for i in 0..g.len() {
                                let d = match op {
                                    ElemOp::Sigmoid => y[i] * (1.0 - y[i]),
                                    ElemOp::Tanh => 1.0 - y[i] * y[i],
                                    ElemOp::Silu => {
                                        let s = array::sigmoid(x[i]);
                                        s + x[i] * s * (1.0 - s)
                                    }
                                    ElemOp::Exp => y[i],
                                    ElemOp::Log => 1.0 / x[i],
                                    ElemOp::Softplus => array::sigmoid(x[i]),
                                    ElemOp::Scale(c) => *c,
                                    ElemOp::AddConst(_) => 1.0,
                                    _ => unreachable!(),
                                };
                                ga[i] += g[i] * d;
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    // ga[m×k] += g[m×n] · bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // gb[k×n] += aᵀ · g
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            gb[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(o, x)| *o += a_ip * x);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::AddRow(x, b) => {
                let n = self.value(*b).len();
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Slice { src, r0, c0 } => {
                let cols = self.value(*src).cols();
                let (nr, nc) = (node.value.rows(), node.value.cols());
                if let Some(gs) = self.acc(grads, *src) {
                    for r in 0..nr {
                        let dst = &mut gs[(r0 + r) * cols + c0..(r0 + r) * cols + c0 + nc];
                        dst.iter_mut().zip(&g[r * nc..(r + 1) * nc]).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(o, v)| *o += v);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut c0 = 0;
                for &p in parts {
                    let nc = self.value(p).cols();
                    let rows = self.value(p).rows();
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..rows {
                            gp[r * nc..(r + 1) * nc]
                                .iter_mut()
                                .zip(&g[r * total + c0..r * total + c0 + nc])
                                .for_each(|(o, v)| *o += v);
                        }
                    }
                    c0 += nc;
                }
            }
            Op::GatherRows(src, indices) => {
                let cols = self.value(*src).cols();
                if let Some(gs) = self.acc(grads, *src) {
                    for (r, &i) in indices.iter().enumerate() {
                        gs[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::ScatterGrid { z, pad, cells } => {
                let d = self.value(*z).cols();
                let n_cells = node.value.rows();
                if let Some(gz) = self.acc(grads, *z) {
                    for (i, &cell) in cells.iter().enumerate() {
                        gz[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[cell * d..(cell + 1) * d])
                            .for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(gp) = self.acc(grads, *pad) {
                    let mut occupied = vec![false; n_cells];
                    cells.iter().for_each(|&c| occupied[c] = true);
                    for (cell, _) in occupied.iter().enumerate().filter(|(_, o)| !**o) {
                        gp.iter_mut().zip(&g[cell * d..(cell + 1) * d]).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::DwConv2d { grid, kernels, pad, height, width, kh, kw } => {
                self.dwconv2d_backward(g, grads, *grid, *kernels, *pad, *height, *width, *kh, *kw);
            }
            Op::CausalConv1d { x, kernel, width } => {
                let xv = self.value(*x);
                let (n, d, w) = (xv.rows(), xv.cols(), *width);
                let xd = xv.data().to_vec();
                let kd = self.value(*kernel).data().to_vec();
                if let Some(gx) = self.acc(grads, *x) {
                    for t in 0..n {
                        for j in 0..w {
                            let lag = w - 1 - j;
                            if lag > t {
                                continue;
                            }
                            for ch in 0..d {
                                gx[(t - lag) * d + ch] += kd[ch * w + j] * g[t * d + ch];
                            }
                        }
                    }
                }
                if let Some(gk) = self.acc(grads, *kernel) {
                    for t in 0..n {
                        for j in 0..w {
                            let lag = w - 1 - j;
                            if lag > t {
                                continue;
                            }
                            for ch in 0..d {
                                gk[ch * w + j] += g[t * d + ch] * xd[(t - lag) * d + ch];
                            }
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = self.value(*x);
                let gain_v = self.value(*gain).data().to_vec();
                let d = xv.cols();
                let rows = xv.rows();
                let xd = xv.data().to_vec();
                let mut gx_local = vec![0.0; xd.len()];
                let mut gg_local = vec![0.0; d];
                for r in 0..rows {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let inv = 1.0 / (xr.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps).sqrt();
                    let dot: f64 = (0..d).map(|j| gr[j] * gain_v[j] * xr[j]).sum();
                    for j in 0..d {
                        gx_local[r * d + j] = inv * gain_v[j] * gr[j] - inv.powi(3) / d as f64 * xr[j] * dot;
                        gg_local[j] += gr[j] * xr[j] * inv;
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(&gx_local).for_each(|(o, v)| *o += v);
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    gg.iter_mut().zip(&gg_local).for_each(|(o, v)| *o += v);
                }
            }
            Op::L2NormGroups { x, group, eps } => {
                let xd = self.value(*x).data().to_vec();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((xs, gs), os) in xd.chunks(*group).zip(g.chunks(*group)).zip(gx.chunks_mut(*group)) {
                        let inv = 1.0 / (xs.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                        let dot: f64 = xs.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..xs.len() {
                            os[j] += inv * gs[j] - inv.powi(3) * xs[j] * dot;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((ys, gs), os) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            os[j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, label } => {
                let p = array::softmax(self.value(*logits).data());
                if let Some(gl) = self.acc(grads, *logits) {
                    for (j, pj) in p.iter().enumerate() {
                        let onehot = if j == *label { 1.0 } else { 0.0 };
                        gl[j] += g[0] * (pj - onehot);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn dwconv2d_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        grid: Var,
        kernels: Var,
        pad: Var,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
    ) {
        let gv = self.value(grid).data().to_vec();
        let kv = self.value(kernels).data().to_vec();
        let pv = self.value(pad).data().to_vec();
        let d = pv.len();
        let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
        let mut g_grid = vec![0.0; gv.len()];
        let mut g_k = vec![0.0; kv.len()];
        let mut g_pad = vec![0.0; d];
        for r in 0..height {
            for c in 0..width {
                let go = &g[(r * width + c) * d..(r * width + c + 1) * d];
                for dr in -rh..=rh {
                    for dc in -rw..=rw {
                        let (sr, sc) = (r as isize + dr, c as isize + dc);
                        let kidx = ((dr + rh) as usize) * kw + (dc + rw) as usize;
                        let inside = sr >= 0 && sc >= 0 && (sr as usize) < height && (sc as usize) < width;
                        if inside {
                            let base = (sr as usize * width + sc as usize) * d;
                            for ch in 0..d {
                                g_grid[base + ch] += kv[ch * kh * kw + kidx] * go[ch];
                                g_k[ch * kh * kw + kidx] += go[ch] * gv[base + ch];
                            }
                        } else {
                            for ch in 0..d {
                                g_pad[ch] += kv[ch * kh * kw + kidx] * go[ch];
                                g_k[ch * kh * kw + kidx] += go[ch] * pv[ch];
                            }
                        }
                    }
                }
            }
        }
        for (v, local) in [(grid, g_grid), (kernels, g_k), (pad, g_pad)] {
            if let Some(acc) = self.acc(grads, v) {
                acc.iter_mut().zip(&local).for_each(|(o, x)| *o += x);
            }
        }
    }
}

/// Gradients of every leaf reached from the loss.
pub struct Gradients {
    grads: Vec<Option<NumArray>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; unused leaves get a zero array of matching shape.
    pub fn get(&self, v: Var) -> NumArray {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => NumArray::zeros(&self.shapes[v.0]),
        }
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over all entries.
    pub max_rel_err: f64,
    /// Worst relative error per parameter array, in input order.
    pub per_param: Vec<f64>,
    pub entries: usize,
}

/// Relative error used by [`finite_diff_check`].
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compare tape gradients of `f` with `(f(p+h) − f(p−h)) / 2h` for every
/// entry of every parameter. `f` records a scalar loss on the given tape
/// from leaves holding `params`.
pub fn finite_diff_check<F>(f: F, params: &[NumArray], h: f64, exec: Exec) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if h <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |ps: &[NumArray]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<NumArray> = vars.iter().map(|&v| grads.get(v)).collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |e| (pi, e)))
        .collect();
    let errs: Vec<Result<(usize, f64)>> = par::map(exec, &coords, |&(pi, e)| {
        let mut ps = params.to_vec();
        let base = ps[pi].data()[e];
        ps[pi].data_mut()[e] = base + h;
        let plus = eval(&ps)?;
        ps[pi].data_mut()[e] = base - h;
        let minus = eval(&ps)?;
        let numeric = (plus - minus) / (2.0 * h);
        Ok((pi, rel_err(analytic[pi].data()[e], numeric)))
    });
    let mut per_param = vec![0.0f64; params.len()];
    for r in errs {
        let (pi, err) = r?;
        per_param[pi] = per_param[pi].max(err);
    }
    Ok(GradCheckReport {
        max_rel_err: per_param.iter().copied().fold(0.0, f64::max),
        per_param,
        entries: coords.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> NumArray {
        let n = shape.iter().product();
        NumArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn scalar_elementwise_values() {
        let z = NumArray::scalar(0.0);
        assert_eq!(elementwise(ElemOp::Sigmoid, &z, None).unwrap().item(), 0.5);
        assert_eq!(elementwise(ElemOp::Tanh, &z, None).unwrap().item(), 0.0);
        let one = NumArray::scalar(1.0);
        let s = elementwise(ElemOp::Silu, &one, None).unwrap().item();
        assert!((s - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
        assert!((s - 0.731_058_578_630_005).abs() < 1e-12);
    }

    #[test]
    fn log_rejects_non_positive() {
        let a = NumArray::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(elementwise(ElemOp::Log, &a, None), Err(Error::NonPositiveLog { index: 1, .. })));
    }

    #[test]
    fn binary_shape_mismatch() {
        let a = NumArray::zeros(&[2, 2]);
        let b = NumArray::zeros(&[3]);
        assert!(elementwise(ElemOp::Add, &a, Some(&b)).is_err());
        let s = NumArray::scalar(2.0);
        assert_eq!(elementwise(ElemOp::Mul, &s, Some(&a)).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.leaf(NumArray::scalar(2.0));
        let y = t.leaf(NumArray::scalar(3.0));
        let p = t.mul(x, y).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(x).item(), 3.0);
        assert_eq!(g.get(y).item(), 2.0);
    }

    #[test]
    fn sigmoid_sum_gradient_is_quarter() {
        let mut t = Tape::new();
        let x = t.leaf(NumArray::zeros(&[4]));
        let s = t.sigmoid(x);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).data(), &[0.25; 4]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(NumArray::scalar(1.0));
        let unused = t.leaf(NumArray::zeros(&[2, 3]));
        let l = t.scale(x, 2.0);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(unused), NumArray::zeros(&[2, 3]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(NumArray::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
        let mut inf = Tape::inference();
        let y = inf.leaf(NumArray::scalar(1.0));
        assert!(matches!(inf.backward(y), Err(Error::GradDisabled)));
    }

    #[test]
    fn replayed_backward_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let a = t.leaf(rand_array(&mut rng, &[3, 3]));
        let b = t.leaf(rand_array(&mut rng, &[3, 1]));
        let ab = t.matmul(a, b).unwrap();
        let sq = t.mul(ab, ab).unwrap();
        let l = t.sum(sq);
        let g1 = t.backward(l).unwrap();
        let g2 = t.backward(l).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }

    #[test]
    fn fd_check_polynomial_and_constant() {
        let rep = finite_diff_check(
            |t, v| t.mul(v[0], v[0]),
            &[NumArray::scalar(3.0)],
            1e-5,
            Exec::Sequential,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-9, "{rep:?}");
        let rep = finite_diff_check(
            |t, v| {
                let z = t.scale(v[0], 0.0);
                Ok(t.add_const(z, 4.0))
            },
            &[NumArray::scalar(1.5)],
            1e-5,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(rep.max_rel_err, 0.0);
    }

    #[test]
    fn fd_check_rejects_bad_step() {
        assert!(finite_diff_check(|t, v| Ok(t.sum(v[0])), &[NumArray::scalar(1.0)], 0.0, Exec::Sequential).is_err());
    }

    #[test]
    fn fd_check_detects_non_determinism() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let counter = AtomicU64::new(0);
        let res = finite_diff_check(
            |t, v| {
                let c = counter.fetch_add(1, Ordering::SeqCst) as f64;
                Ok(t.add_const(v[0], c))
            },
            &[NumArray::scalar(1.0)],
            1e-5,
            Exec::Sequential,
        );
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn squared_matvec_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_array(&mut rng, &[3, 3]);
        let b = rand_array(&mut rng, &[3, 1]);
        let rep = finite_diff_check(
            |t, v| {
                let ab = t.matmul(v[0], v[1])?;
                let sq = t.mul(ab, ab)?;
                Ok(t.sum(sq))
            },
            &[a, b],
            1e-5,
            Exec::Sequential,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    /// Every differentiable op against central differences, 10 seeds.
    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = rand_array(&mut rng, &[4, 6]);
            let w = rand_array(&mut rng, &[6, 6]);
            let bias = rand_array(&mut rng, &[6]);
            let gain = rand_array(&mut rng, &[6]);
            let pad = rand_array(&mut rng, &[6]);
            let k2 = rand_array(&mut rng, &[6, 3, 3]);
            let k1 = rand_array(&mut rng, &[6, 3]);
            let s = rand_array(&mut rng, &[1]);
            let pos = x.map(|v| v.abs() + 0.5);
            let params = vec![x, w, bias, gain, pad, k2, k1, s, pos];
            let rep = finite_diff_check(
                |t, v| {
                    let y = t.linear(v[0], v[1], Some(v[2]))?;
                    let y = t.rms_norm(y, v[3], 1e-6)?;
                    // 4 patches on a 2x3 grid with two empty cells
                    let grid = t.scatter_grid(y, v[4], &[0, 2, 3, 5], 6)?;
                    let conv = t.dwconv2d(grid, v[5], v[4], 2, 3)?;
                    let back = t.gather_rows(conv, &[0, 2, 3, 5])?;
                    let c1 = t.causal_conv1d(back, v[6])?;
                    let th = t.tanh(v[7]);
                    let mixed = t.mul(c1, th)?;
                    let sig = t.sigmoid(mixed);
                    let si = t.silu(mixed);
                    let sp = t.softplus(mixed);
                    let e = t.exp(sig);
                    let lg = t.log(v[8])?;
                    let norm = t.l2_normalize_groups(si, 3, 1e-12)?;
                    let sm = t.softmax_rows(sp);
                    let a = t.sub(e, lg)?;
                    let b = t.mul(norm, sm)?;
                    let c = t.add(a, b)?;
                    let top = t.slice(c, 1, 2, 1, 4)?;
                    let bot = t.slice(c, 0, 2, 0, 4)?;
                    let rows = t.concat_rows(&[top, bot])?;
                    let cols = t.concat_cols(&[rows, rows])?;
                    let flat = t.reshape(cols, &[1, 32])?;
                    let s1 = t.scale(flat, 0.3);
                    let ce = t.cross_entropy_logits(s1, 5)?;
                    let sq = t.mul(c, c)?;
                    let tot = t.sum(sq);
                    t.add(ce, tot)
                },
                &params,
                1e-5,
                Exec::Sequential,
            )
            .unwrap();
            assert!(rep.max_rel_err < 1e-4, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = rand_array(&mut rng, &[5]);
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let f = {
                let s = t.sigmoid(x);
                t.sum(s)
            };
            let g = {
                let sq = t.mul(x, x).unwrap();
                t.sum(sq)
            };
            let out = match which {
                0 => f,
                1 => g,
                _ => t.add(f, g).unwrap(),
            };
            t.backward(out).unwrap().get(x)
        };
        let (gf, gg, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..5 {
            assert!((gf.data()[i] + gg.data()[i] - gs.data()[i]).abs() < 1e-14);
        }
    }
}

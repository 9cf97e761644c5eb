//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! replays the adjoint rules in exact reverse order, accumulating
//! gradients additively when a value feeds several consumers.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::matrix::{gemm, GemmOperand, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A contiguous run of rows that share one graph shift operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowBlock {
    pub start: usize,
    pub len: usize,
    pub shift: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Mse(Var, Var),
    WeightedSqErr {
        pred: Var,
        target: Matrix,
        weights: Vec<f64>,
        denom: f64,
    },
    Sum(Var),
    GraphShift {
        x: Var,
        shifts: Rc<[Matrix]>,
        blocks: Rc<[RowBlock]>,
    },
    ExpandRows {
        x: Var,
        counts: Rc<[usize]>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
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

    /// Clears all recorded operations and gradients.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Result<Var> {
        if self.backward_done {
            return Err(Error::Misuse("recording on a tape after backward; reset first".into()));
        }
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite value produced on tape".into()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b)).map_err(|_| {
            shape_err(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            )
        })?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut value = va.clone();
        value
            .as_mut_slice()
            .iter_mut()
            .zip(vb.as_slice())
            .for_each(|(x, y)| *x += y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", va.shape(), vr.shape())));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            value
                .row_mut(r)
                .iter_mut()
                .zip(vr.as_slice())
                .for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let mut value = self.value(a).clone();
        value.as_mut_slice().iter_mut().for_each(|x| *x *= c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        value.as_mut_slice().iter_mut().for_each(|x| *x = x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        value.as_mut_slice().iter_mut().for_each(|x| *x *= sigmoid(*x));
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    /// Per-row normalization over the feature axis followed by `gain`/`bias` (both `1 x C`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        for p in [gain, bias] {
            if self.value(p).shape() != (1, cols) {
                return Err(shape_err(
                    "layer_norm",
                    format!("affine {:?} for {cols} features", self.value(p).shape()),
                ));
            }
        }
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gain).as_slice(), self.value(bias).as_slice());
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((v, gg), bb) in value.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gg + bb;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let n = va.as_slice().len() as f64;
        let s: f64 = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Matrix::filled(1, 1, s / n), Op::Mse(a, b), rg)
    }

    /// `Σ_r w_r Σ_c (pred − target)² / denom` against a constant target.
    pub fn weighted_sq_err(&mut self, pred: Var, target: Matrix, weights: Vec<f64>, denom: f64) -> Result<Var> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() || weights.len() != vp.rows() {
            return Err(shape_err(
                "weighted_sq_err",
                format!(
                    "{:?} vs {:?} with {} weights",
                    vp.shape(),
                    target.shape(),
                    weights.len()
                ),
            ));
        }
        let mut s = 0.0;
        for (r, w) in weights.iter().enumerate() {
            let row: f64 = vp
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            s += w * row;
        }
        let rg = self.rg(pred);
        self.push(
            Matrix::filled(1, 1, s / denom),
            Op::WeightedSqErr {
                pred,
                target,
                weights,
                denom,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).as_slice().iter().sum();
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, s), Op::Sum(a), rg)
    }

    /// Block-diagonal left multiplication: rows of each block are mixed by
    /// `shifts[block.shift]`.
    pub fn graph_shift(&mut self, x: Var, shifts: Rc<[Matrix]>, blocks: Rc<[RowBlock]>) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut value = Matrix::zeros(vx.rows(), cols);
        for b in blocks.iter() {
            let h = shifts
                .get(b.shift)
                .ok_or_else(|| shape_err("graph_shift", format!("missing shift {}", b.shift)))?;
            if h.shape() != (b.len, b.len) || b.start + b.len > vx.rows() {
                return Err(shape_err(
                    "graph_shift",
                    format!("shift {:?} for block {b:?}", h.shape()),
                ));
            }
            let range = b.start * cols..(b.start + b.len) * cols;
            gemm(
                GemmOperand::plain(h),
                GemmOperand::new(&vx.as_slice()[range.clone()], b.len, cols, false),
                &mut value.as_mut_slice()[range],
                0.0,
            );
        }
        let rg = self.rg(x);
        self.push(value, Op::GraphShift { x, shifts, blocks }, rg)
    }

    /// Repeats row `r` of `x` `counts[r]` times, in order.
    pub fn expand_rows(&mut self, x: Var, counts: Rc<[usize]>) -> Result<Var> {
        let vx = self.value(x);
        if counts.len() != vx.rows() {
            return Err(shape_err(
                "expand_rows",
                format!("{} counts for {} rows", counts.len(), vx.rows()),
            ));
        }
        let total: usize = counts.iter().sum();
        let mut data = Vec::with_capacity(total * vx.cols());
        for (r, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                data.extend_from_slice(vx.row(r));
            }
        }
        let value = Matrix::from_vec(total, vx.cols(), data)?;
        let rg = self.rg(x);
        self.push(value, Op::ExpandRows { x, counts }, rg)
    }

    /// Populates gradients of every differentiable node with respect to the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Misuse("backward called twice without reset".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(shape_err(
                "backward",
                format!("loss has shape {:?}", self.value(loss).shape()),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            } else if g.as_ref().is_some_and(|m| !m.is_finite()) {
                return Err(Error::Numerical("non-finite gradient".into()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if needs(*a) {
                    let acc = slot(grads, *a, va.shape());
                    gemm(
                        GemmOperand::plain(g),
                        GemmOperand::new(vb.as_slice(), vb.rows(), vb.cols(), true),
                        acc.as_mut_slice(),
                        1.0,
                    );
                }
                if needs(*b) {
                    let acc = slot(grads, *b, vb.shape());
                    gemm(
                        GemmOperand::new(va.as_slice(), va.rows(), va.cols(), true),
                        GemmOperand::plain(g),
                        acc.as_mut_slice(),
                        1.0,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(*v) {
                        axpy(slot(grads, *v, g.shape()), 1.0, g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.shape()), 1.0, g);
                }
                if needs(*row) {
                    let acc = slot(grads, *row, (1, g.cols()));
                    for r in 0..g.rows() {
                        acc.as_mut_slice().iter_mut().zip(g.row(r)).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.shape()), *c, g);
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let x = &nodes[a.0].value;
                    let acc = slot(grads, *a, g.shape());
                    for ((s, gv), xv) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                        if *xv > 0.0 {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Silu(a) => {
                if needs(*a) {
                    let x = &nodes[a.0].value;
                    let acc = slot(grads, *a, g.shape());
                    for ((s, gv), xv) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                        let sg = sigmoid(*xv);
                        *s += gv * sg * (1.0 + xv * (1.0 - sg));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                if needs(*gain) {
                    let acc = slot(grads, *gain, (1, cols));
                    for r in 0..rows {
                        for ((s, gv), xh) in acc.as_mut_slice().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *s += gv * xh;
                        }
                    }
                }
                if needs(*bias) {
                    let acc = slot(grads, *bias, (1, cols));
                    for r in 0..rows {
                        acc.as_mut_slice().iter_mut().zip(g.row(r)).for_each(|(s, v)| *s += v);
                    }
                }
                if needs(*x) {
                    let gain_v = nodes[gain.0].value.as_slice();
                    let acc = slot(grads, *x, (rows, cols));
                    let f = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let xh = xhat.row(r);
                        for ((d, gv), gg) in dxhat.iter_mut().zip(g.row(r)).zip(gain_v) {
                            *d = gv * gg;
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(d, v)| d * v).sum();
                        let scale = inv_std[r] / f;
                        for ((s, d), v) in acc.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
                            *s += scale * (f * d - sum_d - v * sum_dx);
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let c = 2.0 * g.as_slice()[0] / va.as_slice().len() as f64;
                let diff: Vec<f64> = va
                    .as_slice()
                    .iter()
                    .zip(vb.as_slice())
                    .map(|(x, y)| c * (x - y))
                    .collect();
                let diff = Matrix::from_vec(va.rows(), va.cols(), diff)?;
                if needs(*a) {
                    axpy(slot(grads, *a, va.shape()), 1.0, &diff);
                }
                if needs(*b) {
                    axpy(slot(grads, *b, va.shape()), -1.0, &diff);
                }
            }
            Op::WeightedSqErr {
                pred,
                target,
                weights,
                denom,
            } => {
                let vp = &nodes[pred.0].value;
                let c = 2.0 * g.as_slice()[0] / denom;
                let acc = slot(grads, *pred, vp.shape());
                for (r, w) in weights.iter().enumerate() {
                    for ((s, p), t) in acc.row_mut(r).iter_mut().zip(vp.row(r)).zip(target.row(r)) {
                        *s += c * w * (p - t);
                    }
                }
            }
            Op::Sum(a) => {
                let shape = nodes[a.0].value.shape();
                let gv = g.as_slice()[0];
                slot(grads, *a, shape).as_mut_slice().iter_mut().for_each(|s| *s += gv);
            }
            Op::GraphShift { x, shifts, blocks } => {
                if needs(*x) {
                    let cols = g.cols();
                    let acc = slot(grads, *x, nodes[x.0].value.shape());
                    for b in blocks.iter() {
                        let h = &shifts[b.shift];
                        let range = b.start * cols..(b.start + b.len) * cols;
                        gemm(
                            GemmOperand::new(h.as_slice(), b.len, b.len, true),
                            GemmOperand::new(&g.as_slice()[range.clone()], b.len, cols, false),
                            &mut acc.as_mut_slice()[range],
                            1.0,
                        );
                    }
                }
            }
            Op::ExpandRows { x, counts } => {
                if needs(*x) {
                    let acc = slot(grads, *x, nodes[x.0].value.shape());
                    let mut src = 0;
                    for (r, &c) in counts.iter().enumerate() {
                        for _ in 0..c {
                            let grow = g.row(src);
                            acc.row_mut(r).iter_mut().zip(grow).for_each(|(s, v)| *s += v);
                            src += 1;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn axpy(acc: &mut Matrix, c: f64, g: &Matrix) {
    acc.as_mut_slice()
        .iter_mut()
        .zip(g.as_slice())
        .for_each(|(s, v)| *s += c * v);
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

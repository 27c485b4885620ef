//! Define-by-run reverse-mode autodiff over [`Array`]s.
//!
//! A [`Tape`] records every op as it is evaluated. Leaf gradients accumulate
//! across [`Tape::backward`] calls until [`Tape::zero_grads`] is called, so
//! several losses can be routed into the same leaves one after another.
//!
//! [`Tape::grad_graph`] runs the backward pass *as tape ops*, which makes the
//! returned gradients differentiable again. Only the ops used by the SiLU
//! velocity networks carry such second-order rules; asking for one elsewhere
//! returns [`Error::NoSecondOrderRule`].

use alloc::vec;
use alloc::vec::Vec;

use crate::array::{gemm, Array};
use crate::math;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    SiluGrad(Var),
    Relu(Var),
    Exp(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    BroadcastRows(Var),
    BroadcastScalar(Var),
    Transpose(Var),
    Concat(Var, Var),
    SliceCols(Var, usize),
    PadCols(Var, usize),
    StopGrad,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Silu(..) => "silu",
            Op::SiluGrad(..) => "silu_grad",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::PadCols(..) => "pad_cols",
            Op::StopGrad => "stop_grad",
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Size counters for comparing the cost of different objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeStats {
    pub nodes: usize,
    /// Floats held by node values.
    pub value_floats: usize,
    /// Largest number of floats held by in-flight adjoints during any backward pass.
    pub peak_adjoint_floats: usize,
}

impl TapeStats {
    pub fn peak_bytes(&self) -> usize {
        (self.value_floats + self.peak_adjoint_floats) * core::mem::size_of::<f64>()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Array>>,
    value_floats: usize,
    peak_adjoint_floats: usize,
}

#[inline]
fn silu(x: f64) -> f64 {
    x * math::sigmoid(x)
}

#[inline]
fn silu_d1(x: f64) -> f64 {
    let s = math::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
fn silu_d2(x: f64) -> f64 {
    let s = math::sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
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

    pub fn stats(&self) -> TapeStats {
        TapeStats {
            nodes: self.nodes.len(),
            value_floats: self.value_floats,
            peak_adjoint_floats: self.peak_adjoint_floats,
        }
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.value_floats += value.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf node. Gradients are collected for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Array {
        match &self.leaf_grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shape(v);
                Array::zeros(r, c)
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Fails if any entry of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(alloc::format!("{what} (node {})", v.0)))
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, value: Array, op: Op) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Array, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&mut self, a: Var, c: Array) -> Result<Var> {
        let c = self.constant(c);
        self.mul(a, c)
    }

    /// `a + row`, with `row` (`1 x cols`) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: av.shape(),
                right: rv.shape(),
            });
        }
        let mut v = av.clone();
        let r = rv.data().to_vec();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        Ok(self.binary(a, row, v, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.unary(a, v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu);
        self.unary(a, v, Op::Silu(a))
    }

    fn silu_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu_d1);
        self.unary(a, v, Op::SiluGrad(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(math::exp);
        self.unary(a, v, Op::Exp(a))
    }

    /// `ln(1 + e^a)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(math::softplus);
        self.unary(a, v, Op::Softplus(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.unary(a, v, Op::Clamp(a, lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    /// Sum of all entries, as a 1x1 array.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    /// Mean of all entries, as a 1x1 array.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = Array::scalar(self.value(a).mean());
        self.unary(a, v, Op::Mean(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_rows();
        self.unary(a, v, Op::SumRows(a))
    }

    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let rv = self.value(row);
        if rv.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                left: rv.shape(),
                right: (n, rv.cols()),
            });
        }
        let v = rv.broadcast_rows(n);
        Ok(self.unary(row, v, Op::BroadcastRows(row)))
    }

    pub fn broadcast_scalar(&mut self, s: Var, rows: usize, cols: usize) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_scalar",
                left: sv.shape(),
                right: (rows, cols),
            });
        }
        let v = Array::full(rows, cols, sv.item());
        Ok(self.unary(s, v, Op::BroadcastScalar(s)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.unary(a, v, Op::Transpose(a))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_cols(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Concat(a, b)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: (r, c),
                right: (start, end),
            });
        }
        let v = self.value(a).slice_cols(start, end);
        Ok(self.unary(a, v, Op::SliceCols(a, start)))
    }

    fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let v = self.value(a).pad_cols(start, total);
        self.unary(a, v, Op::PadCols(a, start))
    }

    /// Forwards the value of `a`; no gradient flows back through it.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad, false)
    }

    /// Backpropagates a scalar loss into every reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_seeded(loss, &Array::scalar(1.0))
    }

    /// Backpropagates an explicit upstream gradient `seed` (same shape as `out`).
    ///
    /// This is how externally computed gradients, such as a score difference,
    /// are injected into the graph.
    pub fn backward_seeded(&mut self, out: Var, seed: &Array) -> Result<()> {
        if self.shape(out) != seed.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward_seeded",
                left: self.shape(out),
                right: seed.shape(),
            });
        }
        let n = out.0 + 1;
        let mut adj: Vec<Option<Array>> = vec![None; n];
        let mut live = seed.len();
        let mut peak = live;
        adj[out.0] = Some(seed.clone());

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            live -= g.len();
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut contribs: [(Option<Var>, Option<Array>); 2] = [(None, None), (None, None)];
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            match node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot @ None => *slot = Some(g),
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    if rg(a) {
                        contribs[0] = (Some(a), Some(gemm(&g, false, val(b), true)?));
                    }
                    if rg(b) {
                        contribs[1] = (Some(b), Some(gemm(val(a), true, &g, false)?));
                    }
                }
                Op::Add(a, b) => {
                    contribs[0] = (Some(a), Some(g.clone()));
                    contribs[1] = (Some(b), Some(g));
                }
                Op::Sub(a, b) => {
                    contribs[1] = (Some(b), Some(g.scale(-1.0)));
                    contribs[0] = (Some(a), Some(g));
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        contribs[0] = (Some(a), Some(g.mul(val(b))?));
                    }
                    if rg(b) {
                        contribs[1] = (Some(b), Some(g.mul(val(a))?));
                    }
                }
                Op::AddRow(a, r) => {
                    contribs[1] = (Some(r), Some(g.sum_rows()));
                    contribs[0] = (Some(a), Some(g));
                }
                Op::Scale(a, c) => contribs[0] = (Some(a), Some(g.scale(c))),
                Op::Silu(a) => contribs[0] = (Some(a), Some(g.zip_map(val(a), "silu", |g, x| g * silu_d1(x))?)),
                Op::SiluGrad(a) => {
                    contribs[0] = (Some(a), Some(g.zip_map(val(a), "silu_grad", |g, x| g * silu_d2(x))?))
                }
                Op::Relu(a) => {
                    contribs[0] = (
                        Some(a),
                        Some(g.zip_map(val(a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?),
                    )
                }
                Op::Exp(a) => contribs[0] = (Some(a), Some(g.mul(&node.value)?)),
                Op::Softplus(a) => {
                    contribs[0] = (Some(a), Some(g.zip_map(val(a), "softplus", |g, x| g * math::sigmoid(x))?))
                }
                Op::Clamp(a, lo, hi) => {
                    contribs[0] = (
                        Some(a),
                        Some(g.zip_map(val(a), "clamp", |g, x| if x > lo && x < hi { g } else { 0.0 })?),
                    )
                }
                Op::Square(a) => contribs[0] = (Some(a), Some(g.zip_map(val(a), "square", |g, x| 2.0 * x * g)?)),
                Op::Sum(a) => {
                    let (r, c) = val(a).shape();
                    contribs[0] = (Some(a), Some(Array::full(r, c, g.item())));
                }
                Op::Mean(a) => {
                    let (r, c) = val(a).shape();
                    contribs[0] = (Some(a), Some(Array::full(r, c, g.item() / (r * c) as f64)));
                }
                Op::SumRows(a) => contribs[0] = (Some(a), Some(g.broadcast_rows(val(a).rows()))),
                Op::BroadcastRows(a) => contribs[0] = (Some(a), Some(g.sum_rows())),
                Op::BroadcastScalar(a) => contribs[0] = (Some(a), Some(Array::scalar(g.sum()))),
                Op::Transpose(a) => contribs[0] = (Some(a), Some(g.transpose())),
                Op::Concat(a, b) => {
                    let ca = val(a).cols();
                    contribs[0] = (Some(a), Some(g.slice_cols(0, ca)));
                    contribs[1] = (Some(b), Some(g.slice_cols(ca, g.cols())));
                }
                Op::SliceCols(a, start) => contribs[0] = (Some(a), Some(g.pad_cols(start, val(a).cols()))),
                Op::PadCols(a, start) => {
                    let w = val(a).cols();
                    contribs[0] = (Some(a), Some(g.slice_cols(start, start + w)));
                }
                Op::StopGrad => {}
            }
            for (p, ga) in contribs {
                let (Some(p), Some(ga)) = (p, ga) else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut adj[p.0] {
                    Some(acc) => acc.add_assign(&ga)?,
                    slot @ None => {
                        live += ga.len();
                        *slot = Some(ga);
                    }
                }
                peak = peak.max(live);
            }
        }
        self.peak_adjoint_floats = self.peak_adjoint_floats.max(peak);
        Ok(())
    }

    /// Differentiable gradients of the scalar `output` with respect to `wrt`.
    ///
    /// The backward pass is recorded on the tape, so the returned vars can be
    /// used in further expressions and differentiated again (grad-of-grad).
    /// Vars unreachable from `output` get zero constants.
    pub fn grad_graph(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let n = output.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; n];
        adj[output.0] = Some(self.constant(Array::scalar(1.0)));

        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let mut contribs: [(Option<Var>, Option<Var>); 2] = [(None, None), (None, None)];
            match op {
                Op::Leaf | Op::StopGrad => continue,
                Op::MatMul(a, b) => {
                    if self.rg(a) {
                        let bt = self.transpose(b);
                        contribs[0] = (Some(a), Some(self.matmul(g, bt)?));
                    }
                    if self.rg(b) {
                        let at = self.transpose(a);
                        contribs[1] = (Some(b), Some(self.matmul(at, g)?));
                    }
                }
                Op::Add(a, b) => contribs = [(Some(a), Some(g)), (Some(b), Some(g))],
                Op::Sub(a, b) => contribs = [(Some(a), Some(g)), (Some(b), Some(self.neg(g)))],
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        contribs[0] = (Some(a), Some(self.mul(g, b)?));
                    }
                    if self.rg(b) {
                        contribs[1] = (Some(b), Some(self.mul(g, a)?));
                    }
                }
                Op::AddRow(a, r) => {
                    let gr = self.sum_rows(g);
                    contribs = [(Some(a), Some(g)), (Some(r), Some(gr))];
                }
                Op::Scale(a, c) => contribs[0] = (Some(a), Some(self.scale(g, c))),
                Op::Silu(a) => {
                    let d = self.silu_grad(a);
                    contribs[0] = (Some(a), Some(self.mul(g, d)?));
                }
                Op::Exp(a) => contribs[0] = (Some(a), Some(self.mul(g, Var(i))?)),
                Op::Clamp(a, lo, hi) => {
                    let mask = self.value(a).map(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                    contribs[0] = (Some(a), Some(self.mul_const(g, mask)?));
                }
                Op::Square(a) => {
                    let two_a = self.scale(a, 2.0);
                    contribs[0] = (Some(a), Some(self.mul(g, two_a)?));
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(a);
                    contribs[0] = (Some(a), Some(self.broadcast_scalar(g, r, c)?));
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(a);
                    let b = self.broadcast_scalar(g, r, c)?;
                    contribs[0] = (Some(a), Some(self.scale(b, 1.0 / (r * c) as f64)));
                }
                Op::SumRows(a) => {
                    let r = self.shape(a).0;
                    contribs[0] = (Some(a), Some(self.broadcast_rows(g, r)?));
                }
                Op::BroadcastRows(a) => contribs[0] = (Some(a), Some(self.sum_rows(g))),
                Op::BroadcastScalar(a) => contribs[0] = (Some(a), Some(self.sum(g))),
                Op::Transpose(a) => contribs[0] = (Some(a), Some(self.transpose(g))),
                Op::Concat(a, b) => {
                    let ca = self.shape(a).1;
                    let cg = self.shape(g).1;
                    contribs[0] = (Some(a), Some(self.slice_cols(g, 0, ca)?));
                    contribs[1] = (Some(b), Some(self.slice_cols(g, ca, cg)?));
                }
                Op::SliceCols(a, start) => {
                    let total = self.shape(a).1;
                    contribs[0] = (Some(a), Some(self.pad_cols(g, start, total)));
                }
                Op::PadCols(a, start) => {
                    let w = self.shape(a).1;
                    contribs[0] = (Some(a), Some(self.slice_cols(g, start, start + w)?));
                }
                Op::SiluGrad(_) | Op::Relu(_) | Op::Softplus(_) => {
                    return Err(Error::NoSecondOrderRule(op.name()));
                }
            }
            for (p, gp) in contribs {
                let (Some(p), Some(gp)) = (p, gp) else { continue };
                if !self.rg(p) {
                    continue;
                }
                adj[p.0] = Some(match adj[p.0] {
                    Some(acc) => self.add(acc, gp)?,
                    None => gp,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(w);
                    self.constant(Array::zeros(r, c))
                }
            })
            .collect())
    }
}

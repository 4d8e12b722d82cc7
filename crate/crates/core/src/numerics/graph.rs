//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological order for the backward pass. Every
//! forward result is checked for non-finite values and the failing node is
//! reported by index and operation name.

use super::kernels::{axpy, dot, matmul_nn, matmul_nt, matmul_tn};
use super::{Real, Tensor, DIV_EPS};
use crate::{Error, Result};
use std::sync::Arc;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-user candidate item lists for scoring.
///
/// `All` scores every item for every user. `Listed` stores a `users × width`
/// index matrix; entries at or past `valid[u]` are padding and are ignored by
/// the masked operations.
#[derive(Clone, Debug, PartialEq)]
pub enum Candidates {
    All {
        users: usize,
        items: usize,
    },
    Listed {
        width: usize,
        items: Vec<u32>,
        valid: Vec<usize>,
    },
}

impl Candidates {
    pub fn users(&self) -> usize {
        match self {
            Candidates::All { users, .. } => *users,
            Candidates::Listed { valid, .. } => valid.len(),
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Candidates::All { items, .. } => *items,
            Candidates::Listed { width, .. } => *width,
        }
    }

    #[inline]
    pub fn item(&self, u: usize, l: usize) -> usize {
        match self {
            Candidates::All { .. } => l,
            Candidates::Listed { width, items, .. } => items[u * width + l] as usize,
        }
    }

    #[inline]
    pub fn valid(&self, u: usize) -> usize {
        match self {
            Candidates::All { items, .. } => *items,
            Candidates::Listed { valid, .. } => valid[u],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

enum Op<F: Real> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Binary(Bin, Var, Var, Bcast),
    Scale(Var, F),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, F, F),
    Softmax(Var),
    LogSoftmax(Var, Option<Arc<Candidates>>),
    RowNormalize(Var),
    Sum(Var),
    SliceCols(Var, usize),
    SparsePool {
        rows: Arc<Vec<Vec<u32>>>,
        weights: Var,
        values: Var,
    },
    GatherDot {
        q: Var,
        items: Var,
        cand: Arc<Candidates>,
        groups: usize,
    },
    MixtureLse {
        scores: Var,
        weights: Var,
        cand: Arc<Candidates>,
        groups: usize,
    },
    PickSum(Var, Arc<Vec<(usize, usize)>>),
}

impl<F: Real> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_t",
            Op::Binary(Bin::Add, ..) => "add",
            Op::Binary(Bin::Sub, ..) => "sub",
            Op::Binary(Bin::Mul, ..) => "mul",
            Op::Binary(Bin::Div, ..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::RowNormalize(..) => "row_normalize",
            Op::Sum(..) => "sum",
            Op::SliceCols(..) => "slice_cols",
            Op::SparsePool { .. } => "sparse_pool",
            Op::GatherDot { .. } => "gather_dot",
            Op::MixtureLse { .. } => "mixture_logsumexp",
            Op::PickSum(..) => "pick_sum",
        }
    }
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// A tape of tensor operations with reverse-mode differentiation.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &str, a: [usize; 2], b: [usize; 2]) -> Error {
    Error::Dimension(format!("{op}: {a:?} vs {b:?}"))
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// flowed there.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::Numeric {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(id))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(dim_err("matmul", ta.shape(), tb.shape()));
        }
        let out = Tensor::new(
            ta.rows(),
            tb.cols(),
            matmul_nn(ta.data(), tb.data(), ta.rows(), ta.cols(), tb.cols()),
        )?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(dim_err("matmul_t", ta.shape(), tb.shape()));
        }
        let out = Tensor::new(
            ta.rows(),
            tb.rows(),
            matmul_nt(ta.data(), tb.data(), ta.rows(), ta.cols(), tb.rows()),
        )?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    fn binary(&mut self, kind: Bin, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = (ta.rows(), ta.cols());
        let bc = if tb.shape() == ta.shape() {
            Bcast::Same
        } else if tb.rows() == 1 && tb.cols() == 1 {
            Bcast::Scalar
        } else if tb.rows() == 1 && tb.cols() == c {
            Bcast::Row
        } else if tb.cols() == 1 && tb.rows() == r {
            Bcast::Col
        } else {
            return Err(dim_err("elementwise", ta.shape(), tb.shape()));
        };
        let f = |x: F, y: F| match kind {
            Bin::Add => x + y,
            Bin::Sub => x - y,
            Bin::Mul => x * y,
            Bin::Div => x / y,
        };
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(f(ta.get(i, j), bval(tb, bc, i, j)));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(r, c, data)?, Op::Binary(kind, a, b, bc), ng)
    }

    /// Elementwise sum; `b` may broadcast as a row, column or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Div, a, b)
    }

    /// Multiplies by a pre-sampled dropout mask, which is treated as constant.
    pub fn dropout(&mut self, a: Var, mask: Tensor<F>) -> Result<Var> {
        let m = self.constant(mask)?;
        self.mul(a, m)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Result<Var> {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        for i in 0..t.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise log-softmax. With `cand`, row `u` only normalises over its
    /// first `cand.valid(u)` columns; padding columns are set to zero.
    pub fn log_softmax(&mut self, a: Var, cand: Option<Arc<Candidates>>) -> Result<Var> {
        let t = self.value(a);
        if let Some(c) = &cand {
            if c.users() != t.rows() || c.width() != t.cols() {
                return Err(dim_err("log_softmax", t.shape(), [c.users(), c.width()]));
            }
        }
        let mut out = t.clone();
        for i in 0..t.rows() {
            let n = cand.as_ref().map_or(t.cols(), |c| c.valid(i));
            let row = out.row_mut(i);
            let lse = log_sum_exp(&row[..n]);
            for v in &mut row[..n] {
                *v = *v - lse;
            }
            for v in &mut row[n..] {
                *v = F::zero();
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a, cand), ng)
    }

    /// `x / (‖x‖ + 1e-8)` per row.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).normalize_rows();
        let ng = self.ng(a);
        self.push(out, Op::RowNormalize(a), ng)
    }

    /// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        self.matmul_t(na, nb)
    }

    /// Sum of all entries as a `1×1` tensor (accumulated in `f64`).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(F::of(s)), Op::Sum(a), ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(Error::Dimension(format!(
                "slice {start}..{end} of {} columns",
                t.cols()
            )));
        }
        let out = Tensor::from_fn(t.rows(), end - start, |i, j| t.get(i, start + j));
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Weighted bag pooling: for user `u` and group `k`, row `u·K + k` of the
    /// output is `Σ_{i ∈ rows[u]} weights[i,k] · values[i]`.
    pub fn sparse_pool(
        &mut self,
        rows: Arc<Vec<Vec<u32>>>,
        weights: Var,
        values: Var,
    ) -> Result<Var> {
        let (w, v) = (self.value(weights), self.value(values));
        if w.rows() != v.rows() {
            return Err(dim_err("sparse_pool", w.shape(), v.shape()));
        }
        let (k, dv, m) = (w.cols(), v.cols(), w.rows());
        let mut out = Tensor::zeros(rows.len() * k, dv);
        for (u, row) in rows.iter().enumerate() {
            for &i in row {
                let i = i as usize;
                if i >= m {
                    return Err(Error::Dimension(format!("item {i} out of {m}")));
                }
                for g in 0..k {
                    let c = w.get(i, g);
                    if c != F::zero() {
                        axpy(c, v.row(i), out.row_mut(u * k + g));
                    }
                }
            }
        }
        let ng = self.ng(weights) || self.ng(values);
        self.push(
            out,
            Op::SparsePool {
                rows,
                weights,
                values,
            },
            ng,
        )
    }

    /// Candidate scores: output row `u·groups + k`, column `l` is
    /// `q[u·groups + k] · items[cand(u, l)]`.
    pub fn gather_dot(
        &mut self,
        q: Var,
        items: Var,
        cand: Arc<Candidates>,
        groups: usize,
    ) -> Result<Var> {
        let (tq, th) = (self.value(q), self.value(items));
        if tq.cols() != th.cols() || tq.rows() != cand.users() * groups {
            return Err(dim_err("gather_dot", tq.shape(), th.shape()));
        }
        let out = match cand.as_ref() {
            Candidates::All { items: m, .. } => {
                if *m != th.rows() {
                    return Err(dim_err("gather_dot", tq.shape(), th.shape()));
                }
                Tensor::new(
                    tq.rows(),
                    th.rows(),
                    matmul_nt(tq.data(), th.data(), tq.rows(), tq.cols(), th.rows()),
                )?
            }
            Candidates::Listed { width, .. } => {
                let mut out = Tensor::zeros(tq.rows(), *width);
                for r in 0..tq.rows() {
                    let u = r / groups;
                    for l in 0..cand.valid(u) {
                        let it = cand.item(u, l);
                        out.set(r, l, dot(tq.row(r), th.row(it)));
                    }
                }
                out
            }
        };
        let ng = self.ng(q) || self.ng(items);
        self.push(
            out,
            Op::GatherDot {
                q,
                items,
                cand,
                groups,
            },
            ng,
        )
    }

    /// Mixture log-sum-exp over groups:
    /// `out[u,l] = ln Σ_k weights[cand(u,l), k] · exp(scores[u·K + k, l])`.
    pub fn mixture_lse(
        &mut self,
        scores: Var,
        weights: Var,
        cand: Arc<Candidates>,
        groups: usize,
    ) -> Result<Var> {
        let (ts, tw) = (self.value(scores), self.value(weights));
        let users = cand.users();
        if ts.rows() != users * groups || ts.cols() != cand.width() || tw.cols() != groups {
            return Err(dim_err("mixture_lse", ts.shape(), tw.shape()));
        }
        let mut out = Tensor::zeros(users, cand.width());
        for u in 0..users {
            for l in 0..cand.valid(u) {
                let it = cand.item(u, l);
                let mut mx = F::neg_infinity();
                for k in 0..groups {
                    if tw.get(it, k) > F::zero() {
                        mx = mx.max(ts.get(u * groups + k, l));
                    }
                }
                let mut acc = 0.0f64;
                for k in 0..groups {
                    let w = tw.get(it, k);
                    if w > F::zero() {
                        acc += (w * (ts.get(u * groups + k, l) - mx).exp()).as_f64();
                    }
                }
                out.set(u, l, mx + F::of(acc.ln()));
            }
        }
        let ng = self.ng(scores) || self.ng(weights);
        self.push(
            out,
            Op::MixtureLse {
                scores,
                weights,
                cand,
                groups,
            },
            ng,
        )
    }

    /// Sum of the listed `(row, col)` entries as a `1×1` tensor.
    pub fn pick_sum(&mut self, a: Var, picks: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let t = self.value(a);
        let mut s = 0.0f64;
        for &(r, c) in picks.iter() {
            if r >= t.rows() || c >= t.cols() {
                return Err(Error::Dimension(format!("pick ({r},{c}) of {:?}", t.shape())));
            }
            s += t.get(r, c).as_f64();
        }
        let ng = self.ng(a);
        self.push(Tensor::scalar(F::of(s)), Op::PickSum(a, picks), ng)
    }

    /// Backpropagates from the scalar node `out`; gradients are then available
    /// via [`Graph::grad`].
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let t = self.value(out);
        if t.shape() != [1, 1] {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got {:?}",
                t.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(Tensor::scalar(F::one()));
        for id in (0..=out.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                self.grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: Tensor<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.data_mut().iter_mut().zip(delta.data()).for_each(|(a, b)| *a += *b),
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, id: usize, g: &Tensor<F>) {
        let nodes = &self.nodes;
        let y = &nodes[id].value;
        let val = |v: Var| &nodes[v.0].value;
        let mut updates: Vec<(Var, Tensor<F>)> = Vec::with_capacity(2);
        match &nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.ng(*a) {
                    let d = matmul_nt(g.data(), tb.data(), g.rows(), g.cols(), tb.rows());
                    updates.push((*a, Tensor::new(ta.rows(), ta.cols(), d).unwrap()));
                }
                if self.ng(*b) {
                    let d = matmul_tn(ta.data(), g.data(), ta.rows(), ta.cols(), g.cols());
                    updates.push((*b, Tensor::new(tb.rows(), tb.cols(), d).unwrap()));
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.ng(*a) {
                    let d = matmul_nn(g.data(), tb.data(), g.rows(), g.cols(), tb.cols());
                    updates.push((*a, Tensor::new(ta.rows(), ta.cols(), d).unwrap()));
                }
                if self.ng(*b) {
                    let d = matmul_tn(g.data(), ta.data(), g.rows(), g.cols(), ta.cols());
                    updates.push((*b, Tensor::new(tb.rows(), tb.cols(), d).unwrap()));
                }
            }
            Op::Binary(kind, a, b, bc) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, c) = (ta.rows(), ta.cols());
                if self.ng(*a) {
                    let da = Tensor::from_fn(r, c, |i, j| {
                        let gv = g.get(i, j);
                        match kind {
                            Bin::Add | Bin::Sub => gv,
                            Bin::Mul => gv * bval(tb, *bc, i, j),
                            Bin::Div => gv / bval(tb, *bc, i, j),
                        }
                    });
                    updates.push((*a, da));
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(tb.rows(), tb.cols());
                    for i in 0..r {
                        for j in 0..c {
                            let gv = g.get(i, j);
                            let bv = bval(tb, *bc, i, j);
                            let d = match kind {
                                Bin::Add => gv,
                                Bin::Sub => -gv,
                                Bin::Mul => gv * ta.get(i, j),
                                Bin::Div => -gv * ta.get(i, j) / (bv * bv),
                            };
                            let (bi, bj) = bidx(*bc, i, j);
                            let cur = db.get(bi, bj);
                            db.set(bi, bj, cur + d);
                        }
                    }
                    updates.push((*b, db));
                }
            }
            Op::Scale(a, s) => updates.push((*a, g.map(|v| v * *s))),
            Op::AddScalar(a) => updates.push((*a, g.clone())),
            Op::Tanh(a) => updates.push((*a, zip_map(g, y, |gv, yv| gv * (F::one() - yv * yv)))),
            Op::Exp(a) => updates.push((*a, zip_map(g, y, |gv, yv| gv * yv))),
            Op::Log(a) => updates.push((*a, zip_map(g, val(*a), |gv, xv| gv / xv))),
            Op::Sqrt(a) => updates.push((*a, zip_map(g, y, |gv, yv| gv / (yv + yv)))),
            Op::Square(a) => updates.push((*a, zip_map(g, val(*a), |gv, xv| gv * (xv + xv)))),
            Op::Clamp(a, lo, hi) => updates.push((
                *a,
                zip_map(g, val(*a), |gv, xv| {
                    if xv < *lo || xv > *hi {
                        F::zero()
                    } else {
                        gv
                    }
                }),
            )),
            Op::Softmax(a) => {
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = dot(yr, gr);
                    for (o, (yv, gv)) in d.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = *yv * (*gv - s);
                    }
                }
                updates.push((*a, d));
            }
            Op::LogSoftmax(a, cand) => {
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let n = cand.as_ref().map_or(y.cols(), |c| c.valid(i));
                    let gr = &g.row(i)[..n];
                    let gs: F = gr.iter().copied().sum();
                    let yr = &y.row(i)[..n];
                    for (o, (yv, gv)) in d.row_mut(i)[..n].iter_mut().zip(yr.iter().zip(gr)) {
                        *o = *gv - yv.exp() * gs;
                    }
                }
                updates.push((*a, d));
            }
            Op::RowNormalize(a) => {
                let x = val(*a);
                let eps = F::of(DIV_EPS);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let (xr, gr) = (x.row(i), g.row(i));
                    let n = dot(xr, xr).sqrt();
                    let s = n + eps;
                    let out = d.row_mut(i);
                    for (o, gv) in out.iter_mut().zip(gr) {
                        *o = *gv / s;
                    }
                    if n > F::zero() {
                        let coef = dot(xr, gr) / (n * s * s);
                        axpy(-coef, xr, out);
                    }
                }
                updates.push((*a, d));
            }
            Op::Sum(a) => {
                let x = val(*a);
                updates.push((*a, Tensor::filled(x.rows(), x.cols(), g.item())));
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                updates.push((*a, d));
            }
            Op::SparsePool {
                rows,
                weights,
                values,
            } => {
                let (w, v) = (val(*weights), val(*values));
                let k = w.cols();
                if self.ng(*weights) {
                    let mut dw = Tensor::zeros(w.rows(), k);
                    for (u, row) in rows.iter().enumerate() {
                        for &i in row {
                            let i = i as usize;
                            for gk in 0..k {
                                let cur = dw.get(i, gk);
                                dw.set(i, gk, cur + dot(g.row(u * k + gk), v.row(i)));
                            }
                        }
                    }
                    updates.push((*weights, dw));
                }
                if self.ng(*values) {
                    let mut dv = Tensor::zeros(v.rows(), v.cols());
                    for (u, row) in rows.iter().enumerate() {
                        for &i in row {
                            let i = i as usize;
                            for gk in 0..k {
                                let c = w.get(i, gk);
                                if c != F::zero() {
                                    axpy(c, g.row(u * k + gk), dv.row_mut(i));
                                }
                            }
                        }
                    }
                    updates.push((*values, dv));
                }
            }
            Op::GatherDot {
                q,
                items,
                cand,
                groups,
            } => {
                let (tq, th) = (val(*q), val(*items));
                match cand.as_ref() {
                    Candidates::All { .. } => {
                        if self.ng(*q) {
                            let d = matmul_nn(g.data(), th.data(), g.rows(), g.cols(), th.cols());
                            updates.push((*q, Tensor::new(tq.rows(), tq.cols(), d).unwrap()));
                        }
                        if self.ng(*items) {
                            let d = matmul_tn(g.data(), tq.data(), g.rows(), g.cols(), tq.cols());
                            updates.push((*items, Tensor::new(th.rows(), th.cols(), d).unwrap()));
                        }
                    }
                    Candidates::Listed { .. } => {
                        let mut dq = Tensor::zeros(tq.rows(), tq.cols());
                        let mut dh = Tensor::zeros(th.rows(), th.cols());
                        for r in 0..tq.rows() {
                            let u = r / groups;
                            for l in 0..cand.valid(u) {
                                let gv = g.get(r, l);
                                if gv == F::zero() {
                                    continue;
                                }
                                let it = cand.item(u, l);
                                axpy(gv, th.row(it), dq.row_mut(r));
                                axpy(gv, tq.row(r), dh.row_mut(it));
                            }
                        }
                        if self.ng(*q) {
                            updates.push((*q, dq));
                        }
                        if self.ng(*items) {
                            updates.push((*items, dh));
                        }
                    }
                }
            }
            Op::MixtureLse {
                scores,
                weights,
                cand,
                groups,
            } => {
                let (ts, tw) = (val(*scores), val(*weights));
                let k = *groups;
                let mut ds = Tensor::zeros(ts.rows(), ts.cols());
                let mut dw = Tensor::zeros(tw.rows(), tw.cols());
                for u in 0..cand.users() {
                    for l in 0..cand.valid(u) {
                        let gv = g.get(u, l);
                        if gv == F::zero() {
                            continue;
                        }
                        let it = cand.item(u, l);
                        let yv = y.get(u, l);
                        for gk in 0..k {
                            let e = (ts.get(u * k + gk, l) - yv).exp();
                            let w = tw.get(it, gk);
                            ds.set(u * k + gk, l, gv * w * e);
                            let cur = dw.get(it, gk);
                            dw.set(it, gk, cur + gv * e);
                        }
                    }
                }
                if self.ng(*scores) {
                    updates.push((*scores, ds));
                }
                if self.ng(*weights) {
                    updates.push((*weights, dw));
                }
            }
            Op::PickSum(a, picks) => {
                let x = val(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let gv = g.item();
                for &(r, c) in picks.iter() {
                    let cur = d.get(r, c);
                    d.set(r, c, cur + gv);
                }
                updates.push((*a, d));
            }
        }
        for (v, d) in updates {
            self.acc(v, d);
        }
    }
}

#[inline]
fn bval<F: Real>(b: &Tensor<F>, bc: Bcast, i: usize, j: usize) -> F {
    let (bi, bj) = bidx(bc, i, j);
    b.get(bi, bj)
}

#[inline]
fn bidx(bc: Bcast, i: usize, j: usize) -> (usize, usize) {
    match bc {
        Bcast::Same => (i, j),
        Bcast::Row => (0, j),
        Bcast::Col => (i, 0),
        Bcast::Scalar => (0, 0),
    }
}

fn zip_map<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.rows(), a.cols(), data).unwrap()
}

/// Stable `ln Σ exp(x)`, accumulated in `f64`.
pub(crate) fn log_sum_exp<F: Real>(x: &[F]) -> F {
    let mx = x.iter().copied().fold(F::neg_infinity(), F::max);
    if !mx.is_finite() {
        return mx;
    }
    let s: f64 = x.iter().map(|v| (*v - mx).as_f64().exp()).sum();
    mx + F::of(s.ln())
}

pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += v.as_f64();
    }
    let inv = F::of(1.0 / s);
    row.iter_mut().for_each(|v| *v = *v * inv);
}

//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every forward op appends a node holding its value and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse,
//! accumulates gradients, and returns the gradients of every leaf that
//! was registered with `requires_grad`. A tape supports exactly one
//! backward pass; build a new tape for the next forward pass.

use std::borrow::Cow;
use std::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::{dot, Tensor};

/// Norms below this make cosine similarity undefined.
pub const MIN_NORM: f64 = 1e-8;

/// Clamp applied to Bernoulli parameters before taking logs.
pub const PROB_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

enum Op<'a> {
    Leaf,
    MatMul(Var, Var),
    TMatMul(Var, Var),
    SpMM(Cow<'a, SparseMatrix>, Var),
    ConstMatMul(Cow<'a, Tensor>, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    MulRow(Var, Var),
    Relu(Var),
    RowNorm(Var),
    ColNorm(Var),
    GatherRows(Var, Vec<usize>),
    Threshold(Var, Vec<bool>),
    MultiHeadCosine(Box<CosineSaved>),
    LogSoftmax(Var),
    Nll(Var, Vec<(usize, usize)>),
    Sum(Var),
    Mean(Var),
    BernoulliLogProb(Var, Tensor),
    BernoulliNegEntropy(Var),
}

struct CosineSaved {
    left: Var,
    right: Var,
    w_left: Var,
    w_right: Var,
    /// per head: unit rows of `w1_h ⊙ z_u`, their pre-normalisation norms,
    /// and the same for the right-hand side
    heads: Vec<HeadSaved>,
    keep: Vec<bool>,
}

struct HeadSaved {
    left_unit: Tensor,
    left_norm: Vec<f64>,
    right_unit: Tensor,
    right_norm: Vec<f64>,
}

struct Node<'a> {
    value: Tensor,
    op: Op<'a>,
    requires_grad: bool,
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: RefCell<Vec<Node<'a>>>,
    consumed: Cell<bool>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copies `v` into a fresh constant; gradients stop here.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.id].value.shape()
    }

    fn live(&self) -> Result<()> {
        if self.consumed.get() {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&self, value: Tensor, op: Op<'a>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { id: nodes.len() - 1 }
    }

    fn record(&self, name: &'static str, value: Tensor, op: Op<'a>, inputs: &[Var]) -> Result<Var> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let v = self.value(a).matmul(&self.value(b))?;
        self.record("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// `aᵀ · b`.
    pub fn t_matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let v = self.value(a).t_matmul(&self.value(b))?;
        self.record("t_matmul", v, Op::TMatMul(a, b), &[a, b])
    }

    /// Constant sparse matrix times a recorded dense value.
    pub fn spmm(&self, s: &'a SparseMatrix, b: Var) -> Result<Var> {
        self.live()?;
        let v = s.matmul_dense(&self.value(b))?;
        self.record("spmm", v, Op::SpMM(Cow::Borrowed(s), b), &[b])
    }

    /// [`Tape::spmm`] with a matrix the tape takes ownership of.
    pub fn spmm_owned(&self, s: SparseMatrix, b: Var) -> Result<Var> {
        self.live()?;
        let v = s.matmul_dense(&self.value(b))?;
        self.record("spmm", v, Op::SpMM(Cow::Owned(s), b), &[b])
    }

    /// Constant dense matrix times a recorded value, without copying the constant.
    pub fn const_matmul(&self, c: &'a Tensor, b: Var) -> Result<Var> {
        self.live()?;
        let v = c.matmul(&self.value(b))?;
        self.record("const_matmul", v, Op::ConstMatMul(Cow::Borrowed(c), b), &[b])
    }

    /// [`Tape::const_matmul`] with a matrix the tape takes ownership of.
    pub fn const_matmul_owned(&self, c: Tensor, b: Var) -> Result<Var> {
        self.live()?;
        let v = c.matmul(&self.value(b))?;
        self.record("const_matmul", v, Op::ConstMatMul(Cow::Owned(c), b), &[b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let v = self.value(a).add(&self.value(b))?;
        self.record("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.live()?;
        let v = self.value(a).scale(c);
        self.record("scale", v, Op::Scale(a, c), &[a])
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let v = self.value(a).hadamard(&self.value(b))?;
        self.record("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&self, a: Var, c: Tensor) -> Result<Var> {
        self.live()?;
        let v = self.value(a).hadamard(&c)?;
        self.record("mul_const", v, Op::MulConst(a, c), &[a])
    }

    /// Scales every row of `a` (`N x d`) elementwise by the row vector `w` (`1 x d`).
    pub fn mul_row(&self, a: Var, w: Var) -> Result<Var> {
        self.live()?;
        let v = {
            let av = self.value(a);
            let wv = self.value(w);
            if wv.rows() != 1 || wv.cols() != av.cols() {
                return Err(Error::Shape(format!(
                    "mul_row: {}x{} by {}x{}",
                    av.rows(),
                    av.cols(),
                    wv.rows(),
                    wv.cols()
                )));
            }
            let mut out = av.clone();
            for r in 0..out.rows() {
                for (o, &s) in out.row_mut(r).iter_mut().zip(wv.row(0)) {
                    *o *= s;
                }
            }
            out
        };
        self.record("mul_row", v, Op::MulRow(a, w), &[a, w])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.live()?;
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.record("relu", v, Op::Relu(a), &[a])
    }

    /// Rows divided by their sums; zero rows stay zero. Entries must be nonnegative.
    pub fn row_normalize(&self, a: Var) -> Result<Var> {
        self.live()?;
        let v = crate::graph::row_normalize(&self.value(a))?;
        self.record("row_normalize", v, Op::RowNorm(a), &[a])
    }

    /// Columns divided by their sums, i.e. `RowNorm(aᵀ)ᵀ`.
    pub fn col_normalize(&self, a: Var) -> Result<Var> {
        self.live()?;
        let v = {
            let av = self.value(a);
            if av.as_slice().iter().any(|&x| x < 0.0) {
                return Err(Error::Domain("col_normalize requires nonnegative entries".into()));
            }
            let sums = column_sums(&av);
            let mut out = av.clone();
            for r in 0..out.rows() {
                for (o, &s) in out.row_mut(r).iter_mut().zip(&sums) {
                    *o = if s > 0.0 { *o / s } else { 0.0 };
                }
            }
            out
        };
        self.record("col_normalize", v, Op::ColNorm(a), &[a])
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        self.live()?;
        let v = {
            let av = self.value(a);
            if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
                return Err(Error::Shape(format!("row {bad} out of range for {} rows", av.rows())));
            }
            av.select_rows(idx)
        };
        self.record("gather_rows", v, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Keeps entries `>= tau`, zeroes the rest. The gradient passes
    /// unchanged through kept entries.
    pub fn threshold(&self, a: Var, tau: f64) -> Result<Var> {
        self.live()?;
        let (v, keep) = {
            let av = self.value(a);
            let keep: Vec<bool> = av.as_slice().iter().map(|&x| x >= tau && x > 0.0).collect();
            let data = av
                .as_slice()
                .iter()
                .zip(&keep)
                .map(|(&x, &k)| if k { x } else { 0.0 })
                .collect();
            (Tensor::from_vec(av.rows(), av.cols(), data)?, keep)
        };
        self.record("threshold", v, Op::Threshold(a, keep), &[a])
    }

    /// Multi-head weighted cosine similarity with truncation:
    /// `out[u][p] = δ((1/H) Σ_h cos(w1_h ⊙ left_u, w2_h ⊙ right_p))` where
    /// `δ(x) = x` if `x >= tau` else `0`.
    ///
    /// `left` is `N x d`, `right` is `P x d`, `w_left`/`w_right` are `H x d`.
    pub fn multi_head_cosine(&self, left: Var, right: Var, w_left: Var, w_right: Var, tau: f64) -> Result<Var> {
        self.cosine_impl(left, right, w_left, w_right, tau, true)
    }

    /// Like [`Tape::multi_head_cosine`], but a row whose scaled norm is
    /// below [`MIN_NORM`] scores 0 against everything (and gets no gradient)
    /// instead of raising a domain error.
    pub fn multi_head_cosine_lenient(&self, left: Var, right: Var, w_left: Var, w_right: Var, tau: f64) -> Result<Var> {
        self.cosine_impl(left, right, w_left, w_right, tau, false)
    }

    fn cosine_impl(&self, left: Var, right: Var, w_left: Var, w_right: Var, tau: f64, strict: bool) -> Result<Var> {
        self.live()?;
        let (value, saved) = {
            let l = self.value(left);
            let r = self.value(right);
            let wl = self.value(w_left);
            let wr = self.value(w_right);
            let d = l.cols();
            if r.cols() != d || wl.cols() != d || wr.cols() != d || wl.rows() != wr.rows() || wl.rows() == 0 {
                return Err(Error::Shape(format!(
                    "multi_head_cosine: left {}x{}, right {}x{}, weights {}x{} / {}x{}",
                    l.rows(),
                    l.cols(),
                    r.rows(),
                    r.cols(),
                    wl.rows(),
                    wl.cols(),
                    wr.rows(),
                    wr.cols()
                )));
            }
            let h = wl.rows();
            let mut mean = Tensor::zeros(l.rows(), r.rows());
            let mut heads = Vec::with_capacity(h);
            for k in 0..h {
                let (left_unit, left_norm) = scaled_unit_rows(&l, wl.row(k), "left", strict)?;
                let (right_unit, right_norm) = scaled_unit_rows(&r, wr.row(k), "right", strict)?;
                let s = left_unit.matmul_t(&right_unit)?;
                mean.add_scaled_assign(&s, 1.0 / h as f64)?;
                heads.push(HeadSaved {
                    left_unit,
                    left_norm,
                    right_unit,
                    right_norm,
                });
            }
            let keep: Vec<bool> = mean.as_slice().iter().map(|&x| x >= tau && x > 0.0).collect();
            for (x, &k) in mean.as_mut_slice().iter_mut().zip(&keep) {
                if !k {
                    *x = 0.0;
                }
            }
            (
                mean,
                CosineSaved {
                    left,
                    right,
                    w_left,
                    w_right,
                    heads,
                    keep,
                },
            )
        };
        self.record(
            "multi_head_cosine",
            value,
            Op::MultiHeadCosine(Box::new(saved)),
            &[left, right, w_left, w_right],
        )
    }

    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        self.live()?;
        let v = {
            let av = self.value(a);
            let mut out = av.clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            out
        };
        self.record("log_softmax", v, Op::LogSoftmax(a), &[a])
    }

    /// Mean negative log-likelihood `-(1/|rows|) Σ logp[i][labels[i]]` over `rows`.
    pub fn nll(&self, logp: Var, labels: &[usize], rows: &[usize]) -> Result<Var> {
        self.live()?;
        if rows.is_empty() {
            return Err(Error::Domain("nll over an empty node set".into()));
        }
        let (v, picks) = {
            let lv = self.value(logp);
            let mut picks = Vec::with_capacity(rows.len());
            let mut acc = 0.0;
            for &i in rows {
                let y = labels[i];
                if i >= lv.rows() || y >= lv.cols() {
                    return Err(Error::Shape(format!("nll index ({i}, {y}) out of range")));
                }
                acc -= lv.get(i, y);
                picks.push((i, y));
            }
            (Tensor::scalar(acc / rows.len() as f64), picks)
        };
        self.record("nll", v, Op::Nll(logp, picks), &[logp])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.live()?;
        let v = Tensor::scalar(self.value(a).sum());
        self.record("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.live()?;
        let v = {
            let av = self.value(a);
            Tensor::scalar(av.sum() / av.len().max(1) as f64)
        };
        self.record("mean", v, Op::Mean(a), &[a])
    }

    /// `Σ b log γ + (1 - b) log(1 - γ)` with γ clamped to `[ε, 1 - ε]`.
    pub fn bernoulli_log_prob(&self, gamma: Var, sample: &Tensor) -> Result<Var> {
        self.live()?;
        let v = {
            let g = self.value(gamma);
            g.check_same_shape(sample, "bernoulli_log_prob")?;
            let mut acc = 0.0;
            for (&p, &b) in g.as_slice().iter().zip(sample.as_slice()) {
                let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                acc += if b != 0.0 { c.ln() } else { (1.0 - c).ln() };
            }
            Tensor::scalar(acc)
        };
        self.record(
            "bernoulli_log_prob",
            v,
            Op::BernoulliLogProb(gamma, sample.clone()),
            &[gamma],
        )
    }

    /// Mean over entries of `γ log γ + (1 - γ) log(1 - γ)` with the same clamp.
    pub fn bernoulli_neg_entropy(&self, gamma: Var) -> Result<Var> {
        self.live()?;
        let v = {
            let g = self.value(gamma);
            let acc: f64 = g
                .as_slice()
                .iter()
                .map(|&p| {
                    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                    c * c.ln() + (1.0 - c) * (1.0 - c).ln()
                })
                .sum();
            Tensor::scalar(acc / g.len().max(1) as f64)
        };
        self.record("bernoulli_neg_entropy", v, Op::BernoulliNegEntropy(gamma), &[gamma])
    }

    /// Runs the reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        self.consumed.set(true);
        let (rows, cols) = nodes[loss.id].value.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads)?;
        }
        for (id, node) in nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn column_sums(t: &Tensor) -> Vec<f64> {
    let mut sums = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (s, &v) in sums.iter_mut().zip(t.row(r)) {
            *s += v;
        }
    }
    sums
}

fn scaled_unit_rows(x: &Tensor, w: &[f64], side: &str, strict: bool) -> Result<(Tensor, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        for (v, &s) in row.iter_mut().zip(w) {
            *v *= s;
        }
        let n = dot(row, row).sqrt();
        if n < MIN_NORM && !strict {
            // zero unit row; an infinite norm makes its backward contribution zero
            row.iter_mut().for_each(|v| *v = 0.0);
            norms.push(f64::INFINITY);
            continue;
        }
        if n < MIN_NORM {
            return Err(Error::Domain(format!(
                "cosine similarity: {side} row {r} has scaled norm {n:e} below {MIN_NORM:e}"
            )));
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node<'_>], v: Var, g: Tensor) -> Result<()> {
    if !nodes[v.id].requires_grad {
        return Ok(());
    }
    match &mut grads[v.id] {
        Some(existing) => existing.add_assign(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Gradient w.r.t. the pre-normalisation rows given gradient `d_unit`
/// w.r.t. unit rows: `(d - û(û·d)) / ‖x‖`.
fn unit_row_backward(unit: &Tensor, norms: &[f64], d_unit: &Tensor) -> Tensor {
    let mut out = d_unit.clone();
    for r in 0..out.rows() {
        let u = unit.row(r);
        let proj = dot(u, d_unit.row(r));
        let n = norms[r];
        for (o, &ui) in out.row_mut(r).iter_mut().zip(u) {
            *o = (*o - ui * proj) / n;
        }
    }
    out
}

fn backprop(nodes: &[Node<'_>], node: &Node<'_>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |v: Var| &nodes[v.id].value;
    let rg = |v: Var| nodes[v.id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if rg(*a) {
                accumulate(grads, nodes, *a, g.matmul_t(val(*b))?)?;
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, val(*a).t_matmul(g)?)?;
            }
        }
        Op::TMatMul(a, b) => {
            // y = aᵀ b: da = b gᵀ, db = a g
            if rg(*a) {
                accumulate(grads, nodes, *a, val(*b).matmul_t(g)?)?;
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, val(*a).matmul(g)?)?;
            }
        }
        Op::SpMM(s, b) => {
            accumulate(grads, nodes, *b, s.t_matmul_dense(g)?)?;
        }
        Op::ConstMatMul(c, b) => {
            accumulate(grads, nodes, *b, c.t_matmul(g)?)?;
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone())?;
            accumulate(grads, nodes, *b, g.clone())?;
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.scale(*c))?,
        Op::Mul(a, b) => {
            if rg(*a) {
                accumulate(grads, nodes, *a, g.hadamard(val(*b))?)?;
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, g.hadamard(val(*a))?)?;
            }
        }
        Op::MulConst(a, c) => accumulate(grads, nodes, *a, g.hadamard(c)?)?,
        Op::MulRow(a, w) => {
            let av = val(*a);
            let wv = val(*w);
            if rg(*a) {
                let mut da = g.clone();
                for r in 0..da.rows() {
                    for (o, &s) in da.row_mut(r).iter_mut().zip(wv.row(0)) {
                        *o *= s;
                    }
                }
                accumulate(grads, nodes, *a, da)?;
            }
            if rg(*w) {
                let mut dw = Tensor::zeros(1, wv.cols());
                for r in 0..av.rows() {
                    for ((o, &x), &gg) in dw.row_mut(0).iter_mut().zip(av.row(r)).zip(g.row(r)) {
                        *o += x * gg;
                    }
                }
                accumulate(grads, nodes, *w, dw)?;
            }
        }
        Op::Relu(a) => {
            let da = val(*a).zip_map(g, |x, gg| if x > 0.0 { gg } else { 0.0 })?;
            accumulate(grads, nodes, *a, da)?;
        }
        Op::RowNorm(a) => {
            let av = val(*a);
            let y = &node.value;
            let mut da = Tensor::zeros(av.rows(), av.cols());
            for r in 0..av.rows() {
                let s: f64 = av.row(r).iter().sum();
                if s <= 0.0 {
                    continue;
                }
                let inner = dot(g.row(r), y.row(r));
                for (o, &gg) in da.row_mut(r).iter_mut().zip(g.row(r)) {
                    *o = (gg - inner) / s;
                }
            }
            accumulate(grads, nodes, *a, da)?;
        }
        Op::ColNorm(a) => {
            let av = val(*a);
            let y = &node.value;
            let sums = column_sums(av);
            let mut inner = vec![0.0; av.cols()];
            for r in 0..av.rows() {
                for ((acc, &gg), &yy) in inner.iter_mut().zip(g.row(r)).zip(y.row(r)) {
                    *acc += gg * yy;
                }
            }
            let mut da = Tensor::zeros(av.rows(), av.cols());
            for r in 0..av.rows() {
                for (c, o) in da.row_mut(r).iter_mut().enumerate() {
                    if sums[c] > 0.0 {
                        *o = (g.get(r, c) - inner[c]) / sums[c];
                    }
                }
            }
            accumulate(grads, nodes, *a, da)?;
        }
        Op::GatherRows(a, idx) => {
            let av = val(*a);
            let mut da = Tensor::zeros(av.rows(), av.cols());
            for (k, &i) in idx.iter().enumerate() {
                for (o, &gg) in da.row_mut(i).iter_mut().zip(g.row(k)) {
                    *o += gg;
                }
            }
            accumulate(grads, nodes, *a, da)?;
        }
        Op::Threshold(a, keep) => {
            let data = g
                .as_slice()
                .iter()
                .zip(keep)
                .map(|(&gg, &k)| if k { gg } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, Tensor::from_vec(g.rows(), g.cols(), data)?)?;
        }
        Op::MultiHeadCosine(saved) => {
            let h = saved.heads.len();
            let data = g
                .as_slice()
                .iter()
                .zip(&saved.keep)
                .map(|(&gg, &k)| if k { gg / h as f64 } else { 0.0 })
                .collect();
            let gs = Tensor::from_vec(g.rows(), g.cols(), data)?;
            let lv = val(saved.left);
            let rv = val(saved.right);
            let wl = val(saved.w_left);
            let wr = val(saved.w_right);
            let mut d_left = Tensor::zeros(lv.rows(), lv.cols());
            let mut d_right = Tensor::zeros(rv.rows(), rv.cols());
            let mut d_wl = Tensor::zeros(wl.rows(), wl.cols());
            let mut d_wr = Tensor::zeros(wr.rows(), wr.cols());
            for (k, hs) in saved.heads.iter().enumerate() {
                // s = Û V̂ᵀ
                let d_lu = gs.matmul(&hs.right_unit)?;
                let d_ru = gs.t_matmul(&hs.left_unit)?;
                // gradients w.r.t. the scaled rows w ⊙ x
                let d_ls = unit_row_backward(&hs.left_unit, &hs.left_norm, &d_lu);
                let d_rs = unit_row_backward(&hs.right_unit, &hs.right_norm, &d_ru);
                for r in 0..lv.rows() {
                    for (c, &ds) in d_ls.row(r).iter().enumerate() {
                        d_left.row_mut(r)[c] += ds * wl.get(k, c);
                        d_wl.row_mut(k)[c] += ds * lv.get(r, c);
                    }
                }
                for r in 0..rv.rows() {
                    for (c, &ds) in d_rs.row(r).iter().enumerate() {
                        d_right.row_mut(r)[c] += ds * wr.get(k, c);
                        d_wr.row_mut(k)[c] += ds * rv.get(r, c);
                    }
                }
            }
            accumulate(grads, nodes, saved.left, d_left)?;
            accumulate(grads, nodes, saved.right, d_right)?;
            accumulate(grads, nodes, saved.w_left, d_wl)?;
            accumulate(grads, nodes, saved.w_right, d_wr)?;
        }
        Op::LogSoftmax(a) => {
            let y = &node.value;
            let mut da = g.clone();
            for r in 0..da.rows() {
                let gs: f64 = g.row(r).iter().sum();
                for (o, &yy) in da.row_mut(r).iter_mut().zip(y.row(r)) {
                    *o -= yy.exp() * gs;
                }
            }
            accumulate(grads, nodes, *a, da)?;
        }
        Op::Nll(logp, picks) => {
            let (rows, cols) = val(*logp).shape();
            let mut d = Tensor::zeros(rows, cols);
            let w = -g.item() / picks.len() as f64;
            for &(i, y) in picks {
                d.row_mut(i)[y] += w;
            }
            accumulate(grads, nodes, *logp, d)?;
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, Tensor::filled(r, c, g.item()))?;
        }
        Op::Mean(a) => {
            let (r, c) = val(*a).shape();
            let n = (r * c).max(1) as f64;
            accumulate(grads, nodes, *a, Tensor::filled(r, c, g.item() / n))?;
        }
        Op::BernoulliLogProb(gamma, sample) => {
            let gv = val(*gamma);
            let s = g.item();
            let d = gv.zip_map(sample, |p, b| {
                if p > PROB_EPS && p < 1.0 - PROB_EPS {
                    s * if b != 0.0 { 1.0 / p } else { -1.0 / (1.0 - p) }
                } else {
                    0.0
                }
            })?;
            accumulate(grads, nodes, *gamma, d)?;
        }
        Op::BernoulliNegEntropy(gamma) => {
            let gv = val(*gamma);
            let s = g.item() / gv.len().max(1) as f64;
            let d = gv.map(|p| {
                if p > PROB_EPS && p < 1.0 - PROB_EPS {
                    s * (p / (1.0 - p)).ln()
                } else {
                    0.0
                }
            });
            accumulate(grads, nodes, *gamma, d)?;
        }
    }
    Ok(())
}

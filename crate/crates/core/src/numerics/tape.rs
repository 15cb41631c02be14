//! Reverse-mode differentiation over dense matrices.
//!
//! Every primitive application is appended to a [`Tape`] together with its
//! value. Operands always refer to earlier entries, so the tape is
//! topologically ordered by construction and [`Tape::backward`] is a single
//! reverse sweep.

use crate::error::{Error, Result};

use super::matrix::{dot, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    Silu(Var),
    RmsNorm(Var, Var),
    Softmax(Var),
    CrossEntropy(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>, usize),
    Pick(Var, Vec<(usize, usize)>),
    RowAsMatrix {
        src: Var,
        row: usize,
        rows: usize,
        cols: usize,
    },
    MeanRows(Var),
    Sum(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulCol(..) => "mul_col",
            Op::Silu(..) => "silu",
            Op::RmsNorm(..) => "rmsnorm",
            Op::Softmax(..) => "softmax_rows",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::Pick(..) => "pick",
            Op::RowAsMatrix { .. } => "row_as_matrix",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::CausalAttention { .. } => "causal_attention",
        }
    }

    fn operands(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::MulCol(a, b)
            | Op::RmsNorm(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Silu(a)
            | Op::Softmax(a)
            | Op::CrossEntropy(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _, _)
            | Op::Pick(a, _)
            | Op::MeanRows(a)
            | Op::Sum(a) => vec![*a],
            Op::RowAsMatrix { src, .. } => vec![*src],
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    /// Computes this op's value from the values of earlier entries.
    fn eval<'a>(&self, val: impl Fn(&Var) -> &'a Matrix) -> Result<Matrix> {
        match self {
            Op::Leaf => Err(Error::invalid("leaf has no forward rule")),
            Op::MatMul(a, b) => val(a).matmul(val(b)),
            Op::MatMulNT(a, b) => val(a).matmul_nt(val(b)),
            Op::Add(a, b) => val(a).add(val(b)),
            Op::Mul(a, b) => val(a).hadamard(val(b)),
            Op::Scale(a, s) => Ok(val(a).scale(*s)),
            Op::MulCol(a, c) => {
                let (a, c) = (val(a), val(c));
                if c.shape() != (a.rows(), 1) {
                    return Err(Error::shape("mul_col", a.shape_str(), c.shape_str()));
                }
                let mut out = a.clone();
                for r in 0..a.rows() {
                    let w = c.get(r, 0);
                    out.row_mut(r).iter_mut().for_each(|x| *x *= w);
                }
                Ok(out)
            }
            Op::Silu(a) => Ok(val(a).map(|x| x * sigmoid(x))),
            Op::RmsNorm(x, g) => {
                let (x, g) = (val(x), val(g));
                if g.shape() != (1, x.cols()) {
                    return Err(Error::shape("rmsnorm", x.shape_str(), g.shape_str()));
                }
                let mut out = x.clone();
                for r in 0..x.rows() {
                    let inv = rms_inv(x.row(r));
                    for (o, gi) in out.row_mut(r).iter_mut().zip(g.data()) {
                        *o = *o * inv * gi;
                    }
                }
                Ok(out)
            }
            Op::Softmax(a) => Ok(val(a).softmax_rows()),
            Op::CrossEntropy(logits, targets) => {
                let logits = val(logits);
                check_targets(logits, targets)?;
                let loss: f64 = targets
                    .iter()
                    .enumerate()
                    .map(|(r, &t)| -log_softmax_at(logits.row(r), t))
                    .sum::<f64>();
                Ok(Matrix::scalar(loss / targets.len() as f64))
            }
            Op::GatherRows(a, idx) => val(a).select_rows(idx),
            Op::ScatterAddRows(a, idx, n) => {
                let a = val(a);
                if idx.len() != a.rows() {
                    return Err(Error::shape(
                        "scatter_add_rows",
                        a.shape_str(),
                        format!("{} indices", idx.len()),
                    ));
                }
                let mut out = Matrix::zeros(*n, a.cols());
                for (r, &dst) in idx.iter().enumerate() {
                    if dst >= *n {
                        return Err(Error::IndexOutOfRange { index: dst, len: *n });
                    }
                    for (o, x) in out.row_mut(dst).iter_mut().zip(a.row(r)) {
                        *o += x;
                    }
                }
                Ok(out)
            }
            Op::Pick(a, pos) => {
                let a = val(a);
                let mut out = Matrix::zeros(pos.len(), 1);
                for (i, &(r, c)) in pos.iter().enumerate() {
                    if r >= a.rows() || c >= a.cols() {
                        return Err(Error::shape(
                            "pick",
                            a.shape_str(),
                            format!("({r},{c})"),
                        ));
                    }
                    out.set(i, 0, a.get(r, c));
                }
                Ok(out)
            }
            Op::RowAsMatrix {
                src,
                row,
                rows,
                cols,
            } => {
                let s = val(src);
                if *row >= s.rows() || rows * cols != s.cols() {
                    return Err(Error::shape(
                        "row_as_matrix",
                        s.shape_str(),
                        format!("row {row} as {rows}x{cols}"),
                    ));
                }
                Matrix::from_vec(*rows, *cols, s.row(*row).to_vec())
            }
            Op::MeanRows(a) => {
                let a = val(a);
                if a.rows() == 0 {
                    return Err(Error::invalid("mean_rows over zero rows"));
                }
                let mut out = Matrix::zeros(1, a.cols());
                for r in 0..a.rows() {
                    for (o, x) in out.row_mut(0).iter_mut().zip(a.row(r)) {
                        *o += x;
                    }
                }
                let n = a.rows() as f64;
                out.data_mut().iter_mut().for_each(|x| *x /= n);
                Ok(out)
            }
            Op::Sum(a) => Ok(Matrix::scalar(val(a).sum())),
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
            } => attention_forward(val(q), val(k), val(v), *batch, *seq, *heads),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    trainable: bool,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`; zeros of the leaf's shape when the loss does
    /// not depend on it.
    pub fn get(&self, var: Var) -> Matrix {
        match self.grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Matrix {
        match self.grads.get_mut(var.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Records a leaf. Trainable leaves receive gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Matrix, trainable: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            trainable,
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let nodes = &self.nodes;
        let value = op.eval(|v| &nodes[v.0].value)?;
        let needs_grad = op.operands().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    /// Multiplies every row `r` of `a` by the scalar `col[r, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.push(Op::MulCol(a, col))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Silu(a))
    }

    /// Row-wise RMS normalization with a `1 x cols` gain and epsilon 1e-6.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.push(Op::RmsNorm(x, gain))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`, as a 1x1.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.push(Op::CrossEntropy(logits, targets))
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows(a, indices))
    }

    /// Output has `n_rows` rows; row `i` of `a` is added into row `indices[i]`.
    pub fn scatter_add_rows(&mut self, a: Var, indices: Vec<usize>, n_rows: usize) -> Result<Var> {
        self.push(Op::ScatterAddRows(a, indices, n_rows))
    }

    /// Column vector of the entries at `positions` (row, col).
    pub fn pick(&mut self, a: Var, positions: Vec<(usize, usize)>) -> Result<Var> {
        self.push(Op::Pick(a, positions))
    }

    /// Views row `row` of `src` as a `rows x cols` matrix.
    pub fn row_as_matrix(&mut self, src: Var, row: usize, rows: usize, cols: usize) -> Result<Var> {
        self.push(Op::RowAsMatrix {
            src,
            row,
            rows,
            cols,
        })
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    /// Multi-head scaled dot-product attention with a causal mask. Inputs are
    /// `(batch*seq) x d` with heads laid out as contiguous column blocks.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        self.push(Op::CausalAttention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
        })
    }

    /// Recomputes every entry from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => op.eval(|v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar `loss`. Selection decisions baked into ops
    /// (gather/pick/scatter indices) are constants of the graph.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != (1, 1) {
            return Err(Error::shape("backward", lv.shape_str(), "1x1 loss"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                if node.trainable {
                    grads[i] = Some(g);
                }
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(val(b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, val(a).matmul_tn(g)?)?;
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a bᵀ ; da = g b ; db = gᵀ a
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul(val(b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(val(a))?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.hadamard(val(b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.hadamard(val(a))?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::MulCol(a, c) => {
                let (av, cv) = (val(a), val(c));
                if self.needs(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        let w = cv.get(r, 0);
                        da.row_mut(r).iter_mut().for_each(|x| *x *= w);
                    }
                    self.accumulate(grads, *a, da)?;
                }
                if self.needs(*c) {
                    let mut dc = Matrix::zeros(cv.rows(), 1);
                    for r in 0..av.rows() {
                        dc.set(r, 0, dot(g.row(r), av.row(r)));
                    }
                    self.accumulate(grads, *c, dc)?;
                }
            }
            Op::Silu(a) => {
                let x = val(a);
                let mut dx = g.clone();
                for (d, &xi) in dx.data_mut().iter_mut().zip(x.data()) {
                    let s = sigmoid(xi);
                    *d *= s * (1.0 + xi * (1.0 - s));
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::RmsNorm(x, gain) => {
                let (xv, gv) = (val(x), val(gain));
                let cols = xv.cols() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let mut dg = Matrix::zeros(1, xv.cols());
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let inv = rms_inv(row);
                    let gr = g.row(r);
                    // xhat = x * inv ; y = xhat * gain
                    let mut proj = 0.0;
                    for j in 0..row.len() {
                        let xhat = row[j] * inv;
                        let dxhat = gr[j] * gv.data()[j];
                        proj += dxhat * xhat;
                        dg.data_mut()[j] += gr[j] * xhat;
                    }
                    proj /= cols;
                    let dxr = dx.row_mut(r);
                    for j in 0..row.len() {
                        let xhat = row[j] * inv;
                        let dxhat = gr[j] * gv.data()[j];
                        dxr[j] = inv * (dxhat - xhat * proj);
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, dx)?;
                }
                if self.needs(*gain) {
                    self.accumulate(grads, *gain, dg)?;
                }
            }
            Op::Softmax(a) => {
                let mut dx = out.clone();
                for r in 0..out.rows() {
                    let p = out.row(r);
                    let gr = g.row(r);
                    let inner = dot(p, gr);
                    for (d, (&pi, &gi)) in dx.row_mut(r).iter_mut().zip(p.iter().zip(gr)) {
                        *d = pi * (gi - inner);
                    }
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::CrossEntropy(logits, targets) => {
                let lv = val(logits);
                let mut dx = lv.softmax_rows();
                let scale = g.item()? / targets.len() as f64;
                for (r, &t) in targets.iter().enumerate() {
                    let row = dx.row_mut(r);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                self.accumulate(grads, *logits, dx)?;
            }
            Op::GatherRows(a, idx) => {
                let av = val(a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (d, x) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::ScatterAddRows(a, idx, _) => {
                self.accumulate(grads, *a, g.select_rows(idx)?)?;
            }
            Op::Pick(a, pos) => {
                let av = val(a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for (i, &(r, c)) in pos.iter().enumerate() {
                    let cur = da.get(r, c);
                    da.set(r, c, cur + g.get(i, 0));
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::RowAsMatrix { src, row, .. } => {
                let sv = val(src);
                let mut ds = Matrix::zeros(sv.rows(), sv.cols());
                ds.row_mut(*row).copy_from_slice(g.data());
                self.accumulate(grads, *src, ds)?;
            }
            Op::MeanRows(a) => {
                let av = val(a);
                let n = av.rows() as f64;
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for (d, x) in da.row_mut(r).iter_mut().zip(g.row(0)) {
                        *d = x / n;
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::Sum(a) => {
                let av = val(a);
                self.accumulate(grads, *a, Matrix::filled(av.rows(), av.cols(), g.item()?))?;
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
            } => {
                let (dq, dk, dv) =
                    attention_backward(val(q), val(k), val(v), g, *batch, *seq, *heads)?;
                if self.needs(*q) {
                    self.accumulate(grads, *q, dq)?;
                }
                if self.needs(*k) {
                    self.accumulate(grads, *k, dk)?;
                }
                if self.needs(*v) {
                    self.accumulate(grads, *v, dv)?;
                }
            }
        }
        Ok(())
    }
}

const RMS_EPS: f64 = 1e-6;

#[inline]
fn rms_inv(row: &[f64]) -> f64 {
    let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
    1.0 / (ms + RMS_EPS).sqrt()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row[t] - lse
}

fn check_targets(logits: &Matrix, targets: &[usize]) -> Result<()> {
    if targets.len() != logits.rows() || targets.is_empty() {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape_str(),
            format!("{} targets", targets.len()),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::IndexOutOfRange {
            index: t,
            len: logits.cols(),
        });
    }
    Ok(())
}

fn check_attention(q: &Matrix, k: &Matrix, v: &Matrix, batch: usize, seq: usize, heads: usize) -> Result<usize> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape("causal_attention", q.shape_str(), k.shape_str()));
    }
    if q.rows() != batch * seq || heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(Error::shape(
            "causal_attention",
            q.shape_str(),
            format!("batch {batch} x seq {seq}, {heads} heads"),
        ));
    }
    Ok(q.cols() / heads)
}

/// Attention weights for one (sequence, head): `seq x seq`, zero above the diagonal.
fn attention_probs(q: &Matrix, k: &Matrix, base: usize, seq: usize, off: usize, hd: usize) -> Vec<f64> {
    let scale = 1.0 / (hd as f64).sqrt();
    let mut p = vec![0.0; seq * seq];
    for t in 0..seq {
        let qr = &q.row(base + t)[off..off + hd];
        let row = &mut p[t * seq..(t + 1) * seq];
        let mut max = f64::NEG_INFINITY;
        for (j, x) in row.iter_mut().enumerate().take(t + 1) {
            *x = dot(qr, &k.row(base + j)[off..off + hd]) * scale;
            max = max.max(*x);
        }
        let mut total = 0.0;
        for x in row.iter_mut().take(t + 1) {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut().take(t + 1) {
            *x /= total;
        }
    }
    p
}

fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, batch: usize, seq: usize, heads: usize) -> Result<Matrix> {
    let hd = check_attention(q, k, v, batch, seq, heads)?;
    let mut out = Matrix::zeros(q.rows(), q.cols());
    for b in 0..batch {
        let base = b * seq;
        for h in 0..heads {
            let off = h * hd;
            let p = attention_probs(q, k, base, seq, off, hd);
            for t in 0..seq {
                let orow = &mut out.row_mut(base + t)[off..off + hd];
                for j in 0..=t {
                    let w = p[t * seq + j];
                    let vr = &v.row(base + j)[off..off + hd];
                    for (o, x) in orow.iter_mut().zip(vr) {
                        *o += w * x;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    g: &Matrix,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<(Matrix, Matrix, Matrix)> {
    let hd = check_attention(q, k, v, batch, seq, heads)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(q.rows(), q.cols());
    let mut dv = Matrix::zeros(q.rows(), q.cols());
    let mut dp = vec![0.0; seq * seq];
    for b in 0..batch {
        let base = b * seq;
        for h in 0..heads {
            let off = h * hd;
            let p = attention_probs(q, k, base, seq, off, hd);
            // dP = dO · Vᵀ ; dV = Pᵀ · dO
            for t in 0..seq {
                let gr = &g.row(base + t)[off..off + hd];
                for j in 0..=t {
                    let vr = &v.row(base + j)[off..off + hd];
                    dp[t * seq + j] = dot(gr, vr);
                    let w = p[t * seq + j];
                    let dvr = &mut dv.row_mut(base + j)[off..off + hd];
                    for (d, x) in dvr.iter_mut().zip(gr) {
                        *d += w * x;
                    }
                }
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then dQ = dS·K·scale, dK = dSᵀ·Q·scale
            for t in 0..seq {
                let inner: f64 = (0..=t).map(|j| dp[t * seq + j] * p[t * seq + j]).sum();
                for j in 0..=t {
                    let ds = p[t * seq + j] * (dp[t * seq + j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..hd {
                        let kv = k.get(base + j, off + c);
                        let qv = q.get(base + t, off + c);
                        let cur = dq.get(base + t, off + c);
                        dq.set(base + t, off + c, cur + ds * kv);
                        let cur = dk.get(base + j, off + c);
                        dk.set(base + j, off + c, cur + ds * qv);
                    }
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

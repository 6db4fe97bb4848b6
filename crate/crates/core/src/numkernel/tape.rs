//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records each primitive as it is evaluated. [`Tape::backward`]
//! replays the record in reverse, accumulating adjoints only along paths that
//! reach a leaf marked trainable.

use super::exact::{dd_add_prod, dd_div, DoubleDouble};
use super::matrix::Matrix;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where a (token, slot) pair reads its expert output in [`Tape::combine`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotSource {
    /// Position in the `experts` list passed to `combine`.
    pub expert: usize,
    /// Row inside that expert's output.
    pub row: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    Sum(Var),
    MeanRows(Var),
    NormalizeRows(Var, f64),
    GatherCols {
        x: Var,
        idx: Vec<usize>,
        k: usize,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Combine {
        weights: Var,
        experts: Vec<Var>,
        slots: Vec<Option<SlotSource>>,
        k: usize,
        renormalize: bool,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` if no trainable path reached it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, materialising exact zeros for untouched values.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Exact (erf-based) GELU, elementwise.
pub fn gelu(x: &Matrix) -> Matrix {
    x.map(gelu_scalar)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn add_row(x: &Matrix, bias: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    out
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Only trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Matrix, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMulT(a, b), rg))
    }

    /// `x · weightᵀ + bias`, with `weight` shaped `(out, in)` and `bias` `(1, out)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Adds a `(1, cols)` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err(format!(
                "row broadcast of {}x{} onto {}x{}",
                bv.rows(),
                bv.cols(),
                xv.rows(),
                xv.cols()
            )));
        }
        let v = add_row(xv, bv);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(v, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).scale(c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = gelu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Softmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    /// Column means, shaped `(1, cols)`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::Argument("mean over zero rows".into()));
        }
        let mut v = Matrix::zeros(1, xv.cols());
        for i in 0..xv.rows() {
            for (o, a) in v.data_mut().iter_mut().zip(xv.row(i)) {
                *o += a;
            }
        }
        let n = xv.rows() as f64;
        v.data_mut().iter_mut().for_each(|o| *o /= n);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::MeanRows(x), rg))
    }

    /// Mean of squared differences against `target` (which receives no gradient).
    pub fn mse(&mut self, prediction: Var, target: Var) -> Result<Var> {
        let n = self.value(prediction).len();
        if n == 0 {
            return Err(Error::Argument("mse over an empty batch".into()));
        }
        let d = self.sub(prediction, target)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// `x / (rowsum(x) + eps)` per row.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut v = self.value(x).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let denom = row.iter().sum::<f64>() + eps;
            row.iter_mut().for_each(|a| *a /= denom);
        }
        let rg = self.rg(&[x]);
        self.push(v, Op::NormalizeRows(x, eps), rg)
    }

    /// Picks `k` columns per row; `idx` is row-major `(rows, k)`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let xv = self.value(x);
        if idx.len() != xv.rows() * k {
            return Err(shape_err(format!(
                "gather of {} indices from {} rows at k={k}",
                idx.len(),
                xv.rows()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= xv.cols()) {
            return Err(shape_err(format!("column {bad} out of {}", xv.cols())));
        }
        let v = Matrix::from_fn(xv.rows(), k, |t, s| xv.get(t, idx[t * k + s]));
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
                k,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&vals)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SliceRows(x, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&vals)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gathers rows by index (repeats allowed); the adjoint scatters back.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(shape_err(format!("row {bad} out of {}", xv.rows())));
        }
        let v = xv.select_rows(rows);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SelectRows(x, rows.to_vec()), rg))
    }

    /// Weighted combination of per-expert outputs into one row per token.
    ///
    /// `weights` is `(tokens, k)`; `slots[t * k + s]` names the expert output
    /// row read by slot `s` of token `t` (`None` contributes nothing). Each
    /// output entry is accumulated in double-double and rounded once. With
    /// `renormalize`, the sum is divided by the exact slot-weight total, which
    /// makes weights summing to one in real arithmetic reproduce a shared
    /// expert output bit for bit.
    pub fn combine(
        &mut self,
        weights: Var,
        experts: &[Var],
        slots: &[Option<SlotSource>],
        renormalize: bool,
    ) -> Result<Var> {
        let wv = self.value(weights);
        let (tokens, k) = wv.shape();
        if slots.len() != tokens * k {
            return Err(shape_err(format!(
                "{} slots for {tokens} tokens at k={k}",
                slots.len()
            )));
        }
        let width = match experts.first() {
            Some(&e) => self.value(e).cols(),
            None => return Err(Error::Argument("combine over zero experts".into())),
        };
        for slot in slots.iter().flatten() {
            let e = experts
                .get(slot.expert)
                .ok_or_else(|| shape_err(format!("expert slot {} out of range", slot.expert)))?;
            let ev = self.value(*e);
            if ev.cols() != width || slot.row >= ev.rows() {
                return Err(shape_err("combine slot outside expert output"));
            }
        }
        let mut out = Matrix::zeros(tokens, width);
        let mut acc = vec![DoubleDouble::ZERO; width];
        for t in 0..tokens {
            acc.iter_mut().for_each(|a| *a = DoubleDouble::ZERO);
            let mut total = DoubleDouble::ZERO;
            for s in 0..k {
                let Some(src) = slots[t * k + s] else {
                    continue;
                };
                let w = wv.get(t, s);
                total = dd_add_prod(total, w, 1.0);
                let y = self.value(experts[src.expert]).row(src.row);
                for (a, &yv) in acc.iter_mut().zip(y) {
                    *a = dd_add_prod(*a, w, yv);
                }
            }
            let row = out.row_mut(t);
            for (o, a) in row.iter_mut().zip(&acc) {
                *o = if renormalize && total.hi != 0.0 {
                    dd_div(*a, total)
                } else {
                    a.hi
                };
            }
        }
        let mut deps = experts.to_vec();
        deps.push(weights);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::Combine {
                weights,
                experts: experts.to_vec(),
                slots: slots.to_vec(),
                k,
                renormalize,
            },
            rg,
        ))
    }

    /// Reverse sweep from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(shape_err("backward requires a 1x1 loss"));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let da = g.matmul_t(self.value(*b))?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.requires_grad(*b) {
                    let db = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::MatMulT(a, b) => {
                if self.requires_grad(*a) {
                    let da = g.matmul(self.value(*b))?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.requires_grad(*b) {
                    let db = g.transpose().matmul(self.value(*a))?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.requires_grad(*b) {
                    let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.requires_grad(*b) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c))?,
            Op::Gelu(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| gv * gelu_grad_scalar(xv))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Softmax(x) => {
                let mut dx = g.clone();
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let dot: f64 = g.row(i).iter().zip(y).map(|(a, b)| a * b).sum();
                    for (d, yv) in dx.row_mut(i).iter_mut().zip(y) {
                        *d = yv * (*d - dot);
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Matrix::filled(r, c, g.get(0, 0)))?;
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).shape();
                let inv = 1.0 / r as f64;
                let dx = Matrix::from_fn(r, c, |_, j| g.get(0, j) * inv);
                self.accumulate(grads, *x, dx)?;
            }
            Op::NormalizeRows(x, eps) => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let row = xv.row(i);
                    let denom = row.iter().sum::<f64>() + eps;
                    let gr = g.row(i);
                    let dot: f64 = gr.iter().zip(row).map(|(a, b)| a * b).sum();
                    for (d, gv) in dx.row_mut(i).iter_mut().zip(gr) {
                        *d = gv / denom - dot / (denom * denom);
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::GatherCols { x, idx, k } => {
                let (r, c) = self.value(*x).shape();
                let mut dx = Matrix::zeros(r, c);
                for t in 0..r {
                    for s in 0..*k {
                        let j = idx[t * k + s];
                        dx.set(t, j, dx.get(t, j) + g.get(t, s));
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.value(*x).shape();
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.slice_cols(offset, w)?)?;
                    }
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                let (r, c) = self.value(*x).shape();
                let mut dx = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    dx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.slice_rows(offset, h)?)?;
                    }
                    offset += h;
                }
            }
            Op::SelectRows(x, rows) => {
                let (r, c) = self.value(*x).shape();
                let mut dx = Matrix::zeros(r, c);
                for (i, &src) in rows.iter().enumerate() {
                    for (d, v) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Combine {
                weights,
                experts,
                slots,
                k,
                renormalize,
            } => {
                self.propagate_combine(*weights, experts, slots, *k, *renormalize, out, g, grads)?
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn propagate_combine(
        &self,
        weights: Var,
        experts: &[Var],
        slots: &[Option<SlotSource>],
        k: usize,
        renormalize: bool,
        out: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let wv = self.value(weights);
        let tokens = wv.rows();
        let mut dw = Matrix::zeros(tokens, k);
        let mut dys: Vec<Option<Matrix>> = experts
            .iter()
            .map(|&e| {
                self.requires_grad(e).then(|| {
                    let (r, c) = self.value(e).shape();
                    Matrix::zeros(r, c)
                })
            })
            .collect();
        for t in 0..tokens {
            let total: f64 = if renormalize {
                (0..k)
                    .filter(|&s| slots[t * k + s].is_some())
                    .map(|s| wv.get(t, s))
                    .sum()
            } else {
                1.0
            };
            if total == 0.0 {
                continue;
            }
            let gt = g.row(t);
            for s in 0..k {
                let Some(src) = slots[t * k + s] else {
                    continue;
                };
                let w = wv.get(t, s);
                let y = self.value(experts[src.expert]).row(src.row);
                let dot: f64 = if renormalize {
                    gt.iter()
                        .zip(y.iter().zip(out.row(t)))
                        .map(|(gv, (yv, ov))| gv * (yv - ov))
                        .sum()
                } else {
                    gt.iter().zip(y).map(|(gv, yv)| gv * yv).sum()
                };
                dw.set(t, s, dot / total);
                if let Some(dy) = dys[src.expert].as_mut() {
                    let scale = w / total;
                    for (d, gv) in dy.row_mut(src.row).iter_mut().zip(gt) {
                        *d += scale * gv;
                    }
                }
            }
        }
        self.accumulate(grads, weights, dw)?;
        for (e, dy) in experts.iter().zip(dys) {
            if let Some(dy) = dy {
                self.accumulate(grads, *e, dy)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_at_zero_is_zero() {
        assert_eq!(gelu(&Matrix::scalar(0.0)).get(0, 0), 0.0);
    }

    #[test]
    fn softmax_symmetric_pair() {
        let p = softmax_rows(&Matrix::row_vector(&[0.0, 0.0]));
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn untouched_leaf_gets_exact_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::row_vector(&[1.0, 2.0]), true);
        let unused = tape.leaf(Matrix::row_vector(&[3.0]), true);
        let s = tape.sum(a);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(&tape, unused).data(), &[0.0]);
        assert_eq!(grads.wrt(&tape, a).data(), &[1.0, 1.0]);
    }

    #[test]
    fn frozen_leaf_receives_nothing() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap(), false);
        let x = tape.leaf(Matrix::row_vector(&[1.0, 1.0]), true);
        let y = tape.matmul_t(x, w).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.wrt(&tape, x).data(), &[2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::zeros(2, 2), true);
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn renormalized_combine_reproduces_shared_output() {
        let mut tape = Tape::new();
        let y = Matrix::from_fn(3, 5, |i, j| ((i * 5 + j) as f64 * 0.731).sin() * 3.3);
        let e0 = tape.constant(y.clone());
        let e1 = tape.constant(y.clone());
        let logits = Matrix::from_fn(3, 2, |i, j| (i as f64 + 0.17) * (j as f64 - 0.4));
        let w = tape.constant(softmax_rows(&logits));
        let slots: Vec<_> = (0..3)
            .flat_map(|t| {
                [
                    Some(SlotSource { expert: 0, row: t }),
                    Some(SlotSource { expert: 1, row: t }),
                ]
            })
            .collect();
        let out = tape.combine(w, &[e0, e1], &slots, true).unwrap();
        assert_eq!(tape.value(out), &y);
    }
}

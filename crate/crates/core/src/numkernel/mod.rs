//! Dense linear algebra plus the reverse-mode tape the routers and experts
//! are built on.

pub(crate) mod exact;
mod matrix;
mod tape;

pub use matrix::{Format, Matrix};
pub use tape::{gelu, softmax_rows, Gradients, SlotSource, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Indices and values of the `k` largest entries, ties going to the lower index.
pub fn topk(values: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k > values.len() {
        return Err(Error::Argument(format!(
            "top-{k} of {} values",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps ascending index among equal values
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(k);
    let picked = order.iter().map(|&i| values[i]).collect();
    Ok((order, picked))
}

/// Projection weights of a multi-head attention block whose keys and values
/// may come from a different embedding width than the queries.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub q_weight: Matrix,
    pub q_bias: Matrix,
    pub k_weight: Matrix,
    pub k_bias: Matrix,
    pub v_weight: Matrix,
    pub v_bias: Matrix,
    pub out_weight: Matrix,
    pub out_bias: Matrix,
}

/// [`AttentionWeights`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub q_weight: Var,
    pub q_bias: Var,
    pub k_weight: Var,
    pub k_bias: Var,
    pub v_weight: Var,
    pub v_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

impl AttentionWeights {
    /// Projections drawn from N(0, 1/fan_in), biases zero.
    pub fn random<R: Rng>(embed_dim: usize, kdim: usize, vdim: usize, rng: &mut R) -> Self {
        let mut proj = |rows: usize, cols: usize| {
            let normal = Normal::new(0.0, (1.0 / cols as f64).sqrt()).expect("finite std");
            Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
        };
        let q_weight = proj(embed_dim, embed_dim);
        let k_weight = proj(embed_dim, kdim);
        let v_weight = proj(embed_dim, vdim);
        let out_weight = proj(embed_dim, embed_dim);
        Self {
            q_weight,
            q_bias: Matrix::zeros(1, embed_dim),
            k_weight,
            k_bias: Matrix::zeros(1, embed_dim),
            v_weight,
            v_bias: Matrix::zeros(1, embed_dim),
            out_weight,
            out_bias: Matrix::zeros(1, embed_dim),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.q_weight.rows()
    }

    pub fn kdim(&self) -> usize {
        self.k_weight.cols()
    }

    pub fn vdim(&self) -> usize {
        self.v_weight.cols()
    }

    pub fn record(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        AttentionVars {
            q_weight: tape.leaf(self.q_weight.clone(), trainable),
            q_bias: tape.leaf(self.q_bias.clone(), trainable),
            k_weight: tape.leaf(self.k_weight.clone(), trainable),
            k_bias: tape.leaf(self.k_bias.clone(), trainable),
            v_weight: tape.leaf(self.v_weight.clone(), trainable),
            v_bias: tape.leaf(self.v_bias.clone(), trainable),
            out_weight: tape.leaf(self.out_weight.clone(), trainable),
            out_bias: tape.leaf(self.out_bias.clone(), trainable),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 8] {
        [
            ("q_weight", &self.q_weight),
            ("q_bias", &self.q_bias),
            ("k_weight", &self.k_weight),
            ("k_bias", &self.k_bias),
            ("v_weight", &self.v_weight),
            ("v_bias", &self.v_bias),
            ("out_weight", &self.out_weight),
            ("out_bias", &self.out_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 8] {
        [
            ("q_weight", &mut self.q_weight),
            ("q_bias", &mut self.q_bias),
            ("k_weight", &mut self.k_weight),
            ("k_bias", &mut self.k_bias),
            ("v_weight", &mut self.v_weight),
            ("v_bias", &mut self.v_bias),
            ("out_weight", &mut self.out_weight),
            ("out_bias", &mut self.out_bias),
        ]
    }
}

/// Scaled dot-product attention with separate Q/K/V input projections,
/// recorded on `tape`.
pub fn mha(
    tape: &mut Tape,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
    w: &AttentionVars,
) -> Result<Var> {
    let embed = tape.value(w.q_weight).rows();
    if heads == 0 || !embed.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{heads} heads do not divide embedding width {embed}"
        )));
    }
    if tape.value(key).rows() != tape.value(value).rows() {
        return Err(Error::Shape("key and value token counts differ".into()));
    }
    let head_dim = embed / heads;
    let q = tape.linear(query, w.q_weight, Some(w.q_bias))?;
    let k = tape.linear(key, w.k_weight, Some(w.k_bias))?;
    let v = tape.linear(value, w.v_weight, Some(w.v_bias))?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores);
        per_head.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&per_head)?;
    tape.linear(merged, w.out_weight, Some(w.out_bias))
}

/// Attention forward pass without gradient bookkeeping.
pub fn mha_forward(
    query: &Matrix,
    key: &Matrix,
    value: &Matrix,
    heads: usize,
    weights: &AttentionWeights,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let k = tape.constant(key.clone());
    let v = tape.constant(value.clone());
    let vars = weights.record(&mut tape, false);
    let out = mha(&mut tape, q, k, v, heads, &vars)?;
    Ok(tape.value(out).clone())
}

/// Denominator floor for [`grad_check`], so near-zero coordinates are
/// compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Compares an analytic gradient against central differences at `point`.
///
/// `f` returns the function value and its analytic gradient. The result is
/// the worst `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Argument(format!("finite-difference step {step}")));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("function value {value}")));
    }
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} coordinates",
            analytic.len(),
            point.len()
        )));
    }
    let mut probe = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let (plus, _) = f(&probe)?;
        probe[i] = point[i] - step;
        let (minus, _) = f(&probe)?;
        probe[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite value near coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Samples an `(rows, cols)` matrix from N(0, std²).
pub fn normal_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    if std == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

//! Token-choice routers: linear, MLP and cross-attention gates, top-k
//! selection, the two load-balancing losses, and the per-layer log hook.
//!
//! Every gate produces logits, takes a softmax over all routed experts and
//! keeps the `top_k` highest scores per token (ties to the lower index). The
//! selected scores are used as-is unless `norm_topk_prob` is set, in which case
//! they are renormalized to sum to one (at any `top_k`, including 1).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::ForwardCtx;
use crate::numkernel::{self, mha, normal_matrix, AttentionWeights, Matrix, Tape, Var};

/// Added to the top-k weight sum before renormalizing.
pub const NORM_TOPK_EPS: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Linear,
    Mlp,
    CrossAttention,
}

impl GateKind {
    /// Standard deviation of the logit-producing layer at init.
    pub fn default_init_std(self) -> f64 {
        match self {
            GateKind::Linear => 0.01,
            GateKind::Mlp | GateKind::CrossAttention => 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub kind: GateKind,
    pub n_routed_experts: usize,
    pub top_k: usize,
    pub aux_loss_alpha: f64,
    pub seq_aux: bool,
    pub norm_topk_prob: bool,
    /// `None` picks the per-kind default (linear 0.01, MLP and attention head 0.002).
    pub gate_init_std: Option<f64>,
    pub mlp_hidden_dim: usize,
    pub attn_heads: usize,
    pub encoder_dim: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            kind: GateKind::Linear,
            n_routed_experts: 2,
            top_k: 2,
            aux_loss_alpha: 0.01,
            seq_aux: false,
            norm_topk_prob: false,
            gate_init_std: None,
            mlp_hidden_dim: 256,
            attn_heads: 2,
            encoder_dim: 64,
        }
    }
}

impl GateConfig {
    pub fn with_kind(kind: GateKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn init_std(&self) -> f64 {
        self.gate_init_std
            .unwrap_or_else(|| self.kind.default_init_std())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_routed_experts == 0 {
            return Err(Error::Config(
                "gate needs at least one routed expert".into(),
            ));
        }
        if self.top_k == 0 || self.top_k > self.n_routed_experts {
            return Err(Error::Config(format!(
                "top_k {} must be in 1..={}",
                self.top_k, self.n_routed_experts
            )));
        }
        if !(self.aux_loss_alpha >= 0.0) {
            return Err(Error::Config(format!(
                "aux_loss_alpha {} must be non-negative",
                self.aux_loss_alpha
            )));
        }
        if !(self.init_std() >= 0.0) {
            return Err(Error::Config("gate_init_std must be non-negative".into()));
        }
        if self.kind == GateKind::Mlp && self.mlp_hidden_dim == 0 {
            return Err(Error::Config("mlp_hidden_dim must be positive".into()));
        }
        if self.kind == GateKind::CrossAttention && (self.attn_heads == 0 || self.encoder_dim == 0)
        {
            return Err(Error::Config(
                "attention gate needs heads and encoder_dim".into(),
            ));
        }
        Ok(())
    }

    /// Whether every routed expert is selected, so the selected weights
    /// form a full distribution over experts.
    pub fn selects_all(&self) -> bool {
        self.top_k == self.n_routed_experts
    }
}

/// Trainable parameters of a gate.
#[derive(Debug, Clone, PartialEq)]
pub enum GateParams {
    Linear {
        weight: Matrix,
    },
    Mlp {
        fc1_weight: Matrix,
        fc1_bias: Matrix,
        fc2_weight: Matrix,
        fc2_bias: Matrix,
    },
    CrossAttention {
        attn: AttentionWeights,
        head_weight: Matrix,
        head_bias: Matrix,
    },
}

fn f32_grid(m: Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

/// A configured gate with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub config: GateConfig,
    pub params: GateParams,
    pub trainable: bool,
}

impl Gate {
    /// Fresh gate. Logit layers use `init_std`; other layers draw from
    /// N(0, 1/fan_in) with zero biases. Values are rounded to binary32 so a
    /// checkpoint round trip is lossless.
    pub fn init<R: Rng>(config: GateConfig, gating_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let e = config.n_routed_experts;
        let std = config.init_std();
        let params = match config.kind {
            GateKind::Linear => GateParams::Linear {
                weight: f32_grid(normal_matrix(e, gating_dim, std, rng)),
            },
            GateKind::Mlp => {
                let hid = config.mlp_hidden_dim;
                let fan_in_std = (1.0 / gating_dim as f64).sqrt();
                GateParams::Mlp {
                    fc1_weight: f32_grid(normal_matrix(hid, gating_dim, fan_in_std, rng)),
                    fc1_bias: Matrix::zeros(1, hid),
                    fc2_weight: f32_grid(normal_matrix(e, hid, std, rng)),
                    fc2_bias: Matrix::zeros(1, e),
                }
            }
            GateKind::CrossAttention => {
                let mut attn = AttentionWeights::random(
                    gating_dim,
                    config.encoder_dim,
                    config.encoder_dim,
                    rng,
                );
                for (_, m) in attn.tensors_mut() {
                    *m = f32_grid(m.clone());
                }
                GateParams::CrossAttention {
                    attn,
                    head_weight: f32_grid(normal_matrix(e, gating_dim, std, rng)),
                    head_bias: Matrix::zeros(1, e),
                }
            }
        };
        Ok(Self {
            config,
            params,
            trainable: true,
        })
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        match &self.params {
            GateParams::Linear { weight } => vec![("weight".into(), weight)],
            GateParams::Mlp {
                fc1_weight,
                fc1_bias,
                fc2_weight,
                fc2_bias,
            } => vec![
                ("fc1_weight".into(), fc1_weight),
                ("fc1_bias".into(), fc1_bias),
                ("fc2_weight".into(), fc2_weight),
                ("fc2_bias".into(), fc2_bias),
            ],
            GateParams::CrossAttention {
                attn,
                head_weight,
                head_bias,
            } => {
                let mut v: Vec<(String, &Matrix)> = attn
                    .tensors()
                    .into_iter()
                    .map(|(n, m)| (format!("attn.{n}"), m))
                    .collect();
                v.push(("head_weight".into(), head_weight));
                v.push(("head_bias".into(), head_bias));
                v
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        match &mut self.params {
            GateParams::Linear { weight } => vec![("weight".into(), weight)],
            GateParams::Mlp {
                fc1_weight,
                fc1_bias,
                fc2_weight,
                fc2_bias,
            } => vec![
                ("fc1_weight".into(), fc1_weight),
                ("fc1_bias".into(), fc1_bias),
                ("fc2_weight".into(), fc2_weight),
                ("fc2_bias".into(), fc2_bias),
            ],
            GateParams::CrossAttention {
                attn,
                head_weight,
                head_bias,
            } => {
                let mut v: Vec<(String, &mut Matrix)> = attn
                    .tensors_mut()
                    .into_iter()
                    .map(|(n, m)| (format!("attn.{n}"), m))
                    .collect();
                v.push(("head_weight".into(), head_weight));
                v.push(("head_bias".into(), head_bias));
                v
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn gating_dim(&self) -> usize {
        match &self.params {
            GateParams::Linear { weight } => weight.cols(),
            GateParams::Mlp { fc1_weight, .. } => fc1_weight.cols(),
            GateParams::CrossAttention { attn, .. } => attn.embed_dim(),
        }
    }
}

/// How tokens are grouped into sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchShape {
    pub bsz: usize,
    pub seq_len: usize,
}

impl BatchShape {
    pub fn single(seq_len: usize) -> Self {
        Self { bsz: 1, seq_len }
    }

    pub fn tokens(&self) -> usize {
        self.bsz * self.seq_len
    }
}

/// Per-token routing outcome of one gate call.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub top_k: usize,
    /// Row-major `(tokens, top_k)`, highest score first.
    pub topk_idx: Vec<usize>,
    pub topk_weight: Matrix,
    /// Softmax over all routed experts, `(tokens, n_experts)`.
    pub full_scores: Matrix,
    pub aux_loss: Option<f64>,
    /// An attention gate ran without encoder states and attended over the
    /// hidden states themselves.
    pub self_attention_fallback: bool,
}

impl RoutingDecision {
    pub fn tokens(&self) -> usize {
        self.full_scores.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.full_scores.cols()
    }

    pub fn experts_of(&self, token: usize) -> &[usize] {
        &self.topk_idx[token * self.top_k..(token + 1) * self.top_k]
    }
}

/// A decision plus the tape handles needed to differentiate through it.
#[derive(Debug, Clone)]
pub struct RecordedRouting {
    pub decision: RoutingDecision,
    pub weights: Var,
    pub aux_loss: Option<Var>,
}

fn logits(
    tape: &mut Tape,
    gate: &Gate,
    hidden: Var,
    batch: BatchShape,
    encoder_states: Option<&[Matrix]>,
    ctx: &mut ForwardCtx,
    prefix: &str,
) -> Result<(Var, bool)> {
    let trainable = gate.trainable;
    match &gate.params {
        GateParams::Linear { weight } => {
            let w = ctx.param(tape, &format!("{prefix}.weight"), weight, trainable);
            Ok((tape.matmul_t(hidden, w)?, false))
        }
        GateParams::Mlp {
            fc1_weight,
            fc1_bias,
            fc2_weight,
            fc2_bias,
        } => {
            let w1 = ctx.param(tape, &format!("{prefix}.fc1_weight"), fc1_weight, trainable);
            let b1 = ctx.param(tape, &format!("{prefix}.fc1_bias"), fc1_bias, trainable);
            let w2 = ctx.param(tape, &format!("{prefix}.fc2_weight"), fc2_weight, trainable);
            let b2 = ctx.param(tape, &format!("{prefix}.fc2_bias"), fc2_bias, trainable);
            let h = tape.linear(hidden, w1, Some(b1))?;
            let h = tape.gelu(h);
            Ok((tape.linear(h, w2, Some(b2))?, false))
        }
        GateParams::CrossAttention {
            attn,
            head_weight,
            head_bias,
        } => {
            let vars = numkernel::AttentionVars {
                q_weight: ctx.param(
                    tape,
                    &format!("{prefix}.attn.q_weight"),
                    &attn.q_weight,
                    trainable,
                ),
                q_bias: ctx.param(
                    tape,
                    &format!("{prefix}.attn.q_bias"),
                    &attn.q_bias,
                    trainable,
                ),
                k_weight: ctx.param(
                    tape,
                    &format!("{prefix}.attn.k_weight"),
                    &attn.k_weight,
                    trainable,
                ),
                k_bias: ctx.param(
                    tape,
                    &format!("{prefix}.attn.k_bias"),
                    &attn.k_bias,
                    trainable,
                ),
                v_weight: ctx.param(
                    tape,
                    &format!("{prefix}.attn.v_weight"),
                    &attn.v_weight,
                    trainable,
                ),
                v_bias: ctx.param(
                    tape,
                    &format!("{prefix}.attn.v_bias"),
                    &attn.v_bias,
                    trainable,
                ),
                out_weight: ctx.param(
                    tape,
                    &format!("{prefix}.attn.out_weight"),
                    &attn.out_weight,
                    trainable,
                ),
                out_bias: ctx.param(
                    tape,
                    &format!("{prefix}.attn.out_bias"),
                    &attn.out_bias,
                    trainable,
                ),
            };
            let hw = ctx.param(
                tape,
                &format!("{prefix}.head_weight"),
                head_weight,
                trainable,
            );
            let hb = ctx.param(tape, &format!("{prefix}.head_bias"), head_bias, trainable);
            let heads = gate.config.attn_heads;
            let fallback = encoder_states.is_none();
            if let Some(enc) = encoder_states {
                if enc.len() != 1 && enc.len() != batch.bsz {
                    return Err(shape_err(format!(
                        "{} encoder sequences for batch of {}",
                        enc.len(),
                        batch.bsz
                    )));
                }
                if let Some(bad) = enc.iter().find(|m| m.cols() != gate.config.encoder_dim) {
                    return Err(shape_err(format!(
                        "encoder states have width {}, gate expects {}",
                        bad.cols(),
                        gate.config.encoder_dim
                    )));
                }
            } else if gate.config.encoder_dim != tape.value(hidden).cols() {
                return Err(Error::Config(format!(
                    "self-attention fallback needs encoder_dim {} to equal hidden width {}",
                    gate.config.encoder_dim,
                    tape.value(hidden).cols()
                )));
            }
            let mut outs = Vec::with_capacity(batch.bsz);
            for b in 0..batch.bsz {
                let q = tape.slice_rows(hidden, b * batch.seq_len, batch.seq_len)?;
                let kv = match encoder_states {
                    Some(enc) => tape.constant(enc[if enc.len() == 1 { 0 } else { b }].clone()),
                    None => q,
                };
                outs.push(mha(tape, q, kv, kv, heads, &vars)?);
            }
            let attn_out = if outs.len() == 1 {
                outs[0]
            } else {
                tape.concat_rows(&outs)?
            };
            Ok((tape.linear(attn_out, hw, Some(hb))?, fallback))
        }
    }
}

/// Runs a gate on `hidden` (`(tokens, gating_dim)`), recording on `tape`.
///
/// The auxiliary loss is produced only when `ctx.training` and α > 0.
pub fn record_gate(
    tape: &mut Tape,
    gate: &Gate,
    hidden: Var,
    batch: BatchShape,
    encoder_states: Option<&[Matrix]>,
    ctx: &mut ForwardCtx,
    prefix: &str,
) -> Result<RecordedRouting> {
    let cfg = &gate.config;
    let n = tape.value(hidden).rows();
    if batch.tokens() != n {
        return Err(shape_err(format!(
            "batch shape {}x{} does not cover {n} tokens",
            batch.bsz, batch.seq_len
        )));
    }
    if tape.value(hidden).cols() != gate.gating_dim() {
        return Err(shape_err(format!(
            "hidden width {} vs gating dim {}",
            tape.value(hidden).cols(),
            gate.gating_dim()
        )));
    }
    let (logits, fallback) = logits(tape, gate, hidden, batch, encoder_states, ctx, prefix)?;
    let scores = tape.softmax(logits);
    let k = cfg.top_k;
    let mut topk_idx = Vec::with_capacity(n * k);
    {
        let sv = tape.value(scores);
        for t in 0..n {
            let (idx, _) = numkernel::topk(sv.row(t), k)?;
            topk_idx.extend(idx);
        }
    }
    let mut weights = tape.gather_cols(scores, &topk_idx, k)?;
    if cfg.norm_topk_prob {
        weights = tape.normalize_rows(weights, NORM_TOPK_EPS);
    }
    let aux = if ctx.training && cfg.aux_loss_alpha > 0.0 {
        if cfg.seq_aux {
            record_aux_loss_seq(tape, scores, &topk_idx, k, cfg.aux_loss_alpha, batch)?
        } else {
            record_aux_loss_global(tape, scores, &topk_idx, k, cfg.aux_loss_alpha)?
        }
    } else {
        None
    };
    let decision = RoutingDecision {
        top_k: k,
        topk_idx,
        topk_weight: tape.value(weights).clone(),
        full_scores: tape.value(scores).clone(),
        aux_loss: aux.map(|v| tape.value(v).get(0, 0)),
        self_attention_fallback: fallback,
    };
    Ok(RecordedRouting {
        decision,
        weights,
        aux_loss: aux,
    })
}

/// Gate forward without gradient bookkeeping.
pub fn gate_forward(
    gate: &Gate,
    hidden: &Matrix,
    batch: BatchShape,
    encoder_states: Option<&[Matrix]>,
    training: bool,
) -> Result<RoutingDecision> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::inference();
    ctx.training = training;
    let h = tape.constant(hidden.clone());
    Ok(record_gate(&mut tape, gate, h, batch, encoder_states, &mut ctx, "gate")?.decision)
}

fn check_selection(topk_idx: &[usize], k: usize, tokens: usize, e: usize) -> Result<()> {
    if tokens == 0 {
        return Err(Error::Argument("aux loss over an empty batch".into()));
    }
    if topk_idx.len() != tokens * k {
        return Err(shape_err(format!(
            "{} selections for {tokens} tokens at k={k}",
            topk_idx.len()
        )));
    }
    if let Some(bad) = topk_idx.iter().find(|&&i| i >= e) {
        return Err(Error::Argument(format!("selection {bad} outside 0..{e}")));
    }
    Ok(())
}

/// `α · Σ_e P_e · f_e` with `P` the mean score and `f = E · selection frequency`.
pub fn record_aux_loss_global(
    tape: &mut Tape,
    scores: Var,
    topk_idx: &[usize],
    k: usize,
    alpha: f64,
) -> Result<Option<Var>> {
    let (n, e) = tape.value(scores).shape();
    check_selection(topk_idx, k, n, e)?;
    if !(alpha > 0.0) {
        return Ok(None);
    }
    let mut fi = Matrix::zeros(1, e);
    for &i in topk_idx {
        fi.data_mut()[i] += 1.0;
    }
    let total = topk_idx.len() as f64;
    fi.data_mut()
        .iter_mut()
        .for_each(|c| *c = *c / total * e as f64);
    let pi = tape.mean_rows(scores)?;
    let fi = tape.constant(fi);
    let prod = tape.mul(pi, fi)?;
    let s = tape.sum(prod);
    Ok(Some(tape.scale(s, alpha)))
}

/// Per-sequence variant: counts are normalized by `seq_len·k/E` within each
/// sequence, dotted with that sequence's mean scores, then averaged over the batch.
pub fn record_aux_loss_seq(
    tape: &mut Tape,
    scores: Var,
    topk_idx: &[usize],
    k: usize,
    alpha: f64,
    batch: BatchShape,
) -> Result<Option<Var>> {
    let (n, e) = tape.value(scores).shape();
    check_selection(topk_idx, k, n, e)?;
    if batch.tokens() != n || batch.bsz == 0 {
        return Err(shape_err(format!(
            "batch shape {}x{} inconsistent with {n} tokens",
            batch.bsz, batch.seq_len
        )));
    }
    if !(alpha > 0.0) {
        return Ok(None);
    }
    let per_seq = batch.seq_len * k;
    let norm = per_seq as f64 / e as f64;
    let mut terms = Vec::with_capacity(batch.bsz);
    for b in 0..batch.bsz {
        let mut ce = Matrix::zeros(1, e);
        for &i in &topk_idx[b * per_seq..(b + 1) * per_seq] {
            ce.data_mut()[i] += 1.0;
        }
        ce.data_mut().iter_mut().for_each(|c| *c /= norm);
        let rows = tape.slice_rows(scores, b * batch.seq_len, batch.seq_len)?;
        let mean = tape.mean_rows(rows)?;
        let ce = tape.constant(ce);
        let prod = tape.mul(mean, ce)?;
        terms.push(tape.sum(prod));
    }
    let stacked = tape.concat_rows(&terms)?;
    let total = tape.sum(stacked);
    Ok(Some(tape.scale(total, alpha / batch.bsz as f64)))
}

/// Value form of [`record_aux_loss_global`]; `None` when α is zero.
pub fn aux_loss_global(
    full_scores: &Matrix,
    topk_idx: &[usize],
    k: usize,
    alpha: f64,
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let s = tape.constant(full_scores.clone());
    Ok(record_aux_loss_global(&mut tape, s, topk_idx, k, alpha)?.map(|v| tape.value(v).get(0, 0)))
}

/// Value form of [`record_aux_loss_seq`].
pub fn aux_loss_seq(
    full_scores: &Matrix,
    topk_idx: &[usize],
    k: usize,
    alpha: f64,
    batch: BatchShape,
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let s = tape.constant(full_scores.clone());
    Ok(
        record_aux_loss_seq(&mut tape, s, topk_idx, k, alpha, batch)?
            .map(|v| tape.value(v).get(0, 0)),
    )
}

/// Per-layer accumulation of routing counts and gate-weight mass between flushes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLog {
    pub counts: Vec<u64>,
    pub weight_mass: Vec<f64>,
    pub tokens: u64,
    pub top_k: usize,
}

impl LayerLog {
    pub fn new(n_experts: usize, top_k: usize) -> Self {
        Self {
            counts: vec![0; n_experts],
            weight_mass: vec![0.0; n_experts],
            tokens: 0,
            top_k,
        }
    }
}

/// Emitted by one [`RoutingLog::record`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedCounts {
    pub layer_index: usize,
    pub step: usize,
    pub counts: Vec<u64>,
    pub weight_mass: Vec<f64>,
}

/// Buffer of routing statistics for every MoE layer, drained by telemetry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingLog {
    pub enabled: bool,
    layers: Vec<Option<LayerLog>>,
}

impl RoutingLog {
    pub fn enabled() -> Self {
        Self {
            enabled: true,
            layers: Vec::new(),
        }
    }

    /// Counts every `topk_idx` occurrence and adds each selected weight to its
    /// expert's mass.
    pub fn record(
        &mut self,
        decision: &RoutingDecision,
        layer_index: usize,
        step: usize,
    ) -> Option<EmittedCounts> {
        if !self.enabled {
            return None;
        }
        let e = decision.n_experts();
        let mut counts = vec![0u64; e];
        let mut mass = vec![0.0; e];
        for t in 0..decision.tokens() {
            for (s, &i) in decision.experts_of(t).iter().enumerate() {
                counts[i] += 1;
                mass[i] += decision.topk_weight.get(t, s);
            }
        }
        if self.layers.len() <= layer_index {
            self.layers.resize(layer_index + 1, None);
        }
        let log = self.layers[layer_index].get_or_insert_with(|| LayerLog::new(e, decision.top_k));
        for (acc, c) in log.counts.iter_mut().zip(&counts) {
            *acc += c;
        }
        for (acc, m) in log.weight_mass.iter_mut().zip(&mass) {
            *acc += m;
        }
        log.tokens += decision.tokens() as u64;
        Some(EmittedCounts {
            layer_index,
            step,
            counts,
            weight_mass: mass,
        })
    }

    /// Drains the buffer, returning `(layer_index, log)` for every layer seen.
    pub fn take(&mut self) -> Vec<(usize, LayerLog)> {
        std::mem::take(&mut self.layers)
            .into_iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|l| (i, l)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_scores(n: usize, row: &[f64]) -> Matrix {
        Matrix::from_fn(n, row.len(), |_, j| row[j])
    }

    #[test]
    fn zero_linear_gate_sends_everything_to_expert_zero() {
        let cfg = GateConfig {
            top_k: 1,
            gate_init_std: Some(0.0),
            ..GateConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gate = Gate::init(cfg, 8, &mut rng).unwrap();
        let x = Matrix::from_fn(10, 8, |i, j| ((i * 8 + j) as f64).sin());
        let d = gate_forward(&gate, &x, BatchShape::single(10), None, false).unwrap();
        assert!(d.topk_idx.iter().all(|&i| i == 0));
        assert!(d.full_scores.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn mlp_gate_matches_hand_composition() {
        let gate = Gate {
            config: GateConfig {
                kind: GateKind::Mlp,
                top_k: 1,
                mlp_hidden_dim: 2,
                ..GateConfig::default()
            },
            params: GateParams::Mlp {
                fc1_weight: Matrix::from_rows(&[[1.0, 0.0], [0.0, -1.0]]).unwrap(),
                fc1_bias: Matrix::row_vector(&[0.0, 0.5]),
                fc2_weight: Matrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]]).unwrap(),
                fc2_bias: Matrix::row_vector(&[0.0, 0.0]),
            },
            trainable: false,
        };
        let x = Matrix::row_vector(&[1.0, 1.0]);
        let d = gate_forward(&gate, &x, BatchShape::single(1), None, false).unwrap();
        // h = gelu([1, -0.5]), reference values from an mpmath evaluation
        let l0: f64 = 2.0 * 0.841_344_746_068_542_9;
        let l1 = -0.154_268_769_362_993_4;
        let p0 = 1.0 / (1.0 + (l1 - l0).exp());
        assert!((d.full_scores.get(0, 0) - p0).abs() < 1e-12);
        assert_eq!(d.topk_idx, vec![0]);
    }

    #[test]
    fn aux_global_balanced_and_collapsed() {
        let s = uniform_scores(4, &[0.5, 0.5]);
        let v = aux_loss_global(&s, &[0, 1, 0, 1], 1, 0.01)
            .unwrap()
            .unwrap();
        assert!((v - 0.01).abs() < 1e-15);
        let s = uniform_scores(4, &[0.9, 0.1]);
        let v = aux_loss_global(&s, &[0, 0, 0, 0], 1, 0.01)
            .unwrap()
            .unwrap();
        assert!((v - 0.018).abs() < 1e-15);
        assert_eq!(aux_loss_global(&s, &[0, 0, 0, 0], 1, 0.0).unwrap(), None);
        assert!(aux_loss_global(&Matrix::zeros(0, 2), &[], 1, 0.01).is_err());
        assert!(aux_loss_global(&s, &[0, 0, 0, 2], 1, 0.01).is_err());
    }

    #[test]
    fn aux_seq_cases() {
        let s = uniform_scores(4, &[0.5, 0.5]);
        let sel = [0, 1, 0, 1];
        let g = aux_loss_global(&s, &sel, 1, 0.01).unwrap().unwrap();
        let q = aux_loss_seq(&s, &sel, 1, 0.01, BatchShape::single(4))
            .unwrap()
            .unwrap();
        assert!((g - q).abs() < 1e-15);
        let s2 = uniform_scores(8, &[0.5, 0.5]);
        let q2 = aux_loss_seq(
            &s2,
            &[0, 1, 0, 1, 0, 1, 0, 1],
            1,
            0.01,
            BatchShape { bsz: 2, seq_len: 4 },
        )
        .unwrap()
        .unwrap();
        assert!((q2 - q).abs() < 1e-15);
        let c = uniform_scores(4, &[1.0, 0.0]);
        let v = aux_loss_seq(&c, &[0; 4], 1, 0.01, BatchShape::single(4))
            .unwrap()
            .unwrap();
        assert!((v - 0.02).abs() < 1e-15);
        assert!(aux_loss_seq(&c, &[0; 4], 1, 0.01, BatchShape { bsz: 3, seq_len: 2 }).is_err());
    }

    #[test]
    fn log_hook_counts_and_mass() {
        let mut log = RoutingLog::enabled();
        let d = RoutingDecision {
            top_k: 1,
            topk_idx: vec![1, 1, 1],
            topk_weight: Matrix::from_vec(3, 1, vec![0.6, 0.7, 0.8]).unwrap(),
            full_scores: uniform_scores(3, &[0.3, 0.7]),
            aux_loss: None,
            self_attention_fallback: false,
        };
        assert_eq!(log.record(&d, 0, 0).unwrap().counts, vec![0, 3]);
        let d2 = RoutingDecision {
            top_k: 2,
            topk_idx: vec![0, 1, 0, 1, 0, 1],
            topk_weight: Matrix::from_fn(3, 2, |_, s| [0.8, 0.2][s]),
            full_scores: uniform_scores(3, &[0.8, 0.2]),
            aux_loss: None,
            self_attention_fallback: false,
        };
        let em = log.record(&d2, 1, 0).unwrap();
        assert_eq!(em.counts, vec![3, 3]);
        assert!((em.weight_mass[0] - 2.4).abs() < 1e-12);
        assert!((em.weight_mass[1] - 0.6).abs() < 1e-12);
        let drained = log.take();
        assert_eq!(drained.len(), 2);
        assert_eq!(drained[1].1.tokens, 3);
        assert!(log.take().is_empty());
        let mut off = RoutingLog::default();
        assert!(off.record(&d, 0, 0).is_none());
    }

    #[test]
    fn config_validation() {
        let bad = GateConfig {
            top_k: 3,
            ..GateConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(GateConfig::with_kind(GateKind::Mlp).init_std(), 0.002);
        assert_eq!(GateConfig::default().init_std(), 0.01);
    }
}

//! Feed-forward experts, the MoE layer and the residual block stack.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, MANIFEST_FILE, PARAMS_FILE,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numkernel::{normal_matrix, Matrix, SlotSource, Tape, Var};
use crate::precision::PrecisionPolicy;
use crate::routing::{record_gate, BatchShape, Gate, RecordedRouting, RoutingDecision};

/// Per-forward-pass settings and the record of which tape leaves are trainable.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub training: bool,
    pub policy: PrecisionPolicy,
    bindings: Vec<(String, Var)>,
}

impl ForwardCtx {
    pub fn inference() -> Self {
        Self {
            training: false,
            policy: PrecisionPolicy::default(),
            bindings: Vec::new(),
        }
    }

    pub fn training(policy: PrecisionPolicy) -> Self {
        Self {
            training: true,
            policy,
            bindings: Vec::new(),
        }
    }

    /// Puts the compute copy of a parameter on the tape.
    pub fn param(&mut self, tape: &mut Tape, name: &str, master: &Matrix, trainable: bool) -> Var {
        let v = tape.leaf(self.policy.compute_copy(master), trainable);
        if trainable {
            self.bindings.push((name.to_owned(), v));
        }
        v
    }

    /// Trainable parameters recorded so far, in recording order.
    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact erf-based GELU between two affine maps.
    Gelu,
    /// SiLU-gated unit with three projections: `down(silu(gate·x) ⊙ up·x)`.
    SiluGated,
}

impl Activation {
    pub fn projections(self) -> usize {
        match self {
            Activation::Gelu => 2,
            Activation::SiluGated => 3,
        }
    }

    fn layer_names(self) -> &'static [&'static str] {
        match self {
            Activation::Gelu => &["fc1", "fc2"],
            Activation::SiluGated => &["gate_proj", "up_proj", "down_proj"],
        }
    }
}

/// Affine map with `(out, in)` weights and an optional `(1, out)` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Option<Matrix>,
}

/// A feed-forward network. The dense model's FFN and every expert use this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub activation: Activation,
    pub layers: Vec<Linear>,
}

/// Shape summary compared by the conversion structure check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnStructure {
    pub activation: Activation,
    pub layer_count: usize,
    pub weight_shapes: Vec<(usize, usize)>,
    pub biases: Vec<bool>,
}

fn f32_grid(m: Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

impl Ffn {
    /// GELU FFN from its four tensors: `fc1_weight (inner, hidden)`,
    /// `fc1_bias (1, inner)`, `fc2_weight (hidden, inner)`, `fc2_bias (1, hidden)`.
    pub fn gelu(
        fc1_weight: Matrix,
        fc1_bias: Matrix,
        fc2_weight: Matrix,
        fc2_bias: Matrix,
    ) -> Result<Self> {
        let (inner, hidden) = fc1_weight.shape();
        if fc1_bias.shape() != (1, inner)
            || fc2_weight.shape() != (hidden, inner)
            || fc2_bias.shape() != (1, hidden)
        {
            return Err(shape_err(format!(
                "inconsistent FFN tensors for hidden {hidden}, inner {inner}"
            )));
        }
        Ok(Self {
            activation: Activation::Gelu,
            layers: vec![
                Linear {
                    weight: fc1_weight,
                    bias: Some(fc1_bias),
                },
                Linear {
                    weight: fc2_weight,
                    bias: Some(fc2_bias),
                },
            ],
        })
    }

    /// All-zero FFN with the given structure.
    pub fn from_structure(s: &FfnStructure) -> Result<Self> {
        if s.layer_count != s.weight_shapes.len() || s.layer_count != s.biases.len() {
            return Err(shape_err("structure lists disagree on layer count"));
        }
        Ok(Self {
            activation: s.activation,
            layers: s
                .weight_shapes
                .iter()
                .zip(&s.biases)
                .map(|(&(r, c), &b)| Linear {
                    weight: Matrix::zeros(r, c),
                    bias: b.then(|| Matrix::zeros(1, r)),
                })
                .collect(),
        })
    }

    pub fn zeros(hidden: usize, inner: usize) -> Self {
        Self::gelu(
            Matrix::zeros(inner, hidden),
            Matrix::zeros(1, inner),
            Matrix::zeros(hidden, inner),
            Matrix::zeros(1, hidden),
        )
        .expect("consistent shapes")
    }

    /// Weights N(0, 1/fan_in), biases N(0, 0.02²), rounded to binary32.
    pub fn random<R: Rng>(hidden: usize, inner: usize, rng: &mut R) -> Self {
        let w1 = normal_matrix(inner, hidden, (1.0 / hidden as f64).sqrt(), rng);
        let b1 = normal_matrix(1, inner, 0.02, rng);
        let w2 = normal_matrix(hidden, inner, (1.0 / inner as f64).sqrt(), rng);
        let b2 = normal_matrix(1, hidden, 0.02, rng);
        Self::gelu(f32_grid(w1), f32_grid(b1), f32_grid(w2), f32_grid(b2))
            .expect("consistent shapes")
    }

    /// Weights N(0, σ²) rounded to binary32, biases zero.
    pub fn micro_noise<R: Rng>(hidden: usize, inner: usize, sigma: f64, rng: &mut R) -> Self {
        let w1 = f32_grid(normal_matrix(inner, hidden, sigma, rng));
        let w2 = f32_grid(normal_matrix(hidden, inner, sigma, rng));
        Self::gelu(w1, Matrix::zeros(1, inner), w2, Matrix::zeros(1, hidden))
            .expect("consistent shapes")
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.cols())
    }

    pub fn inner_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn structure(&self) -> FfnStructure {
        FfnStructure {
            activation: self.activation,
            layer_count: self.layers.len(),
            weight_shapes: self.layers.iter().map(|l| l.weight.shape()).collect(),
            biases: self.layers.iter().map(|l| l.bias.is_some()).collect(),
        }
    }

    /// Named tensors: `fc1_weight`, `fc1_bias`, … in layer order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let names = self.activation.layer_names();
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let n = names.get(i).copied().unwrap_or("extra");
            out.push((format!("{n}_weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("{n}_bias"), b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let names = self.activation.layer_names();
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = names.get(i).copied().unwrap_or("extra");
            out.push((format!("{n}_weight"), &mut l.weight));
            if let Some(b) = &mut l.bias {
                out.push((format!("{n}_bias"), b));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Frobenius norm over weight matrices only (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub(crate) fn record(
        &self,
        tape: &mut Tape,
        x: Var,
        ctx: &mut ForwardCtx,
        prefix: &str,
        trainable: bool,
    ) -> Result<Var> {
        if self.layers.len() != self.activation.projections() {
            return Err(Error::Config(format!(
                "{:?} FFN needs {} projections, has {}",
                self.activation,
                self.activation.projections(),
                self.layers.len()
            )));
        }
        if tape.value(x).cols() != self.hidden_dim() {
            return Err(shape_err(format!(
                "tokens of width {} into FFN of hidden width {}",
                tape.value(x).cols(),
                self.hidden_dim()
            )));
        }
        let names = self.activation.layer_names();
        let mut vars = Vec::with_capacity(self.layers.len());
        for (l, n) in self.layers.iter().zip(names) {
            let w = ctx.param(tape, &format!("{prefix}.{n}_weight"), &l.weight, trainable);
            let b = l
                .bias
                .as_ref()
                .map(|b| ctx.param(tape, &format!("{prefix}.{n}_bias"), b, trainable));
            vars.push((w, b));
        }
        match self.activation {
            Activation::Gelu => {
                let h = tape.linear(x, vars[0].0, vars[0].1)?;
                let h = tape.gelu(h);
                tape.linear(h, vars[1].0, vars[1].1)
            }
            Activation::SiluGated => Err(Error::Config(
                "SiLU-gated FFNs describe foreign checkpoints and are not executable here".into(),
            )),
        }
    }

    /// `fc2(GELU(fc1(x)))` per token.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::inference();
        let xv = tape.constant(x.clone());
        let y = self.record(&mut tape, xv, &mut ctx, "ffn", false)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertRole {
    Routed,
    Shared,
}

/// An FFN serving as an expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFfn {
    pub ffn: Ffn,
    pub role: ExpertRole,
    pub trainable: bool,
}

impl ExpertFfn {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.ffn.forward(x)
    }
}

/// Shared experts applied to every token plus gated routed experts.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub shared: Vec<ExpertFfn>,
    pub routed: Vec<ExpertFfn>,
    pub gate: Gate,
    pub layer_index: usize,
}

/// Tape handles for one MoE layer forward.
#[derive(Debug, Clone)]
pub struct MoeRecord {
    pub output: Var,
    pub routing: RecordedRouting,
}

/// Result of [`MoeLayer::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutput {
    pub output: Matrix,
    pub aux_loss: Option<f64>,
    pub decision: RoutingDecision,
}

impl MoeLayer {
    pub fn hidden_dim(&self) -> usize {
        self.routed.first().map_or(0, |e| e.ffn.hidden_dim())
    }

    pub fn validate(&self) -> Result<()> {
        self.gate.config.validate()?;
        if self.routed.len() != self.gate.config.n_routed_experts {
            return Err(Error::Config(format!(
                "{} routed experts but gate routes over {}",
                self.routed.len(),
                self.gate.config.n_routed_experts
            )));
        }
        let h = self.hidden_dim();
        if self
            .shared
            .iter()
            .chain(&self.routed)
            .any(|e| e.ffn.hidden_dim() != h)
            || self.gate.gating_dim() != h
        {
            return Err(shape_err("experts and gate disagree on hidden width"));
        }
        Ok(())
    }

    fn record_shared(
        &self,
        tape: &mut Tape,
        x: Var,
        ctx: &mut ForwardCtx,
        prefix: &str,
    ) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for (j, e) in self.shared.iter().enumerate() {
            let y = e
                .ffn
                .record(tape, x, ctx, &format!("{prefix}.shared.{j}"), e.trainable)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        Ok(acc)
    }

    /// Dispatches each token to its selected routed experts and combines the
    /// outputs with `weights`. Experts nobody selected are never evaluated.
    fn record_routed(
        &self,
        tape: &mut Tape,
        x: Var,
        decision: &RoutingDecision,
        weights: Var,
        ctx: &mut ForwardCtx,
        prefix: &str,
    ) -> Result<Var> {
        let n = tape.value(x).rows();
        let k = decision.top_k;
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); self.routed.len()];
        let mut slots = Vec::with_capacity(n * k);
        for t in 0..n {
            for &e in decision.experts_of(t) {
                if e >= self.routed.len() {
                    return Err(shape_err(format!("expert {e} outside routed set")));
                }
                slots.push((e, rows[e].len()));
                rows[e].push(t);
            }
        }
        let mut outputs = Vec::new();
        let mut position = vec![usize::MAX; self.routed.len()];
        for (e, r) in rows.iter().enumerate() {
            if r.is_empty() {
                continue;
            }
            let xe = tape.select_rows(x, r)?;
            let expert = &self.routed[e];
            let y = expert.ffn.record(
                tape,
                xe,
                ctx,
                &format!("{prefix}.routed.{e}"),
                expert.trainable,
            )?;
            position[e] = outputs.len();
            outputs.push(y);
        }
        if outputs.is_empty() {
            return Ok(tape.constant(Matrix::zeros(n, self.hidden_dim())));
        }
        let slots: Vec<Option<SlotSource>> = slots
            .into_iter()
            .map(|(e, row)| {
                Some(SlotSource {
                    expert: position[e],
                    row,
                })
            })
            .collect();
        tape.combine(weights, &outputs, &slots, self.gate.config.selects_all())
    }

    /// `Σ shared(x) + Σ_selected g·routed(x)`, recorded on `tape`.
    pub fn record(
        &self,
        tape: &mut Tape,
        x: Var,
        batch: BatchShape,
        encoder_states: Option<&[Matrix]>,
        ctx: &mut ForwardCtx,
        prefix: &str,
    ) -> Result<MoeRecord> {
        let routing = record_gate(
            tape,
            &self.gate,
            x,
            batch,
            encoder_states,
            ctx,
            &format!("{prefix}.gate"),
        )?;
        let routed =
            self.record_routed(tape, x, &routing.decision, routing.weights, ctx, prefix)?;
        let output = match self.record_shared(tape, x, ctx, prefix)? {
            Some(s) => tape.add(s, routed)?,
            None => routed,
        };
        Ok(MoeRecord { output, routing })
    }

    pub fn forward(&self, x: &Matrix, encoder_states: Option<&[Matrix]>) -> Result<MoeOutput> {
        self.forward_batched(x, BatchShape::single(x.rows()), encoder_states, false)
    }

    pub fn forward_batched(
        &self,
        x: &Matrix,
        batch: BatchShape,
        encoder_states: Option<&[Matrix]>,
        training: bool,
    ) -> Result<MoeOutput> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::inference();
        ctx.training = training;
        let xv = tape.constant(x.clone());
        let rec = self.record(&mut tape, xv, batch, encoder_states, &mut ctx, "moe")?;
        Ok(MoeOutput {
            output: tape.value(rec.output).clone(),
            aux_loss: rec.routing.decision.aux_loss,
            decision: rec.routing.decision,
        })
    }

    /// Forward pass with a caller-supplied routing decision instead of the gate.
    pub fn forward_with_decision(&self, x: &Matrix, decision: &RoutingDecision) -> Result<Matrix> {
        if decision.tokens() != x.rows()
            || decision.topk_weight.shape() != (x.rows(), decision.top_k)
        {
            return Err(shape_err("decision does not cover the batch"));
        }
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::inference();
        let xv = tape.constant(x.clone());
        let w = tape.constant(decision.topk_weight.clone());
        let routed = self.record_routed(&mut tape, xv, decision, w, &mut ctx, "moe")?;
        let out = match self.record_shared(&mut tape, xv, &mut ctx, "moe")? {
            Some(s) => tape.add(s, routed)?,
            None => routed,
        };
        Ok(tape.value(out).clone())
    }

    pub fn param_count(&self) -> usize {
        self.shared
            .iter()
            .chain(&self.routed)
            .map(|e| e.ffn.param_count())
            .sum::<usize>()
            + self.gate.param_count()
    }
}

/// Cosine similarity of two routed experts' outputs, averaged over probe tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub a: usize,
    pub b: usize,
    /// `None` when every probe token had a zero-norm output on one side.
    pub cosine: Option<f64>,
    /// Probe tokens dropped because an output vector had zero norm.
    pub skipped_tokens: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

/// Mean per-token cosine similarity between every pair of routed experts.
pub fn expert_output_similarity(
    layer: &MoeLayer,
    probe_tokens: &Matrix,
) -> Result<Vec<PairSimilarity>> {
    if layer.routed.len() < 2 {
        return Err(Error::Argument(
            "similarity needs at least two routed experts".into(),
        ));
    }
    if probe_tokens.rows() == 0 {
        return Err(Error::Argument(
            "similarity needs at least one probe token".into(),
        ));
    }
    let outputs = layer
        .routed
        .iter()
        .map(|e| e.forward(probe_tokens))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for a in 0..outputs.len() {
        for b in a + 1..outputs.len() {
            let mut total = 0.0;
            let mut used = 0usize;
            for t in 0..probe_tokens.rows() {
                if let Some(c) = cosine(outputs[a].row(t), outputs[b].row(t)) {
                    total += c;
                    used += 1;
                }
            }
            pairs.push(PairSimilarity {
                a,
                b,
                cosine: (used > 0).then(|| total / used as f64),
                skipped_tokens: probe_tokens.rows() - used,
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Dense(Ffn),
    Moe(MoeLayer),
}

/// Parameter groups, used for freezing and per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Dense,
    Shared,
    Routed,
    Gate,
}

/// One named parameter tensor of a stack.
#[derive(Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    pub value: &'a Matrix,
}

#[derive(Debug)]
pub struct ParamMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    pub value: &'a mut Matrix,
}

/// Residual stack: `x ← x + block(x)` for each block in order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStack {
    pub hidden_dim: usize,
    pub blocks: Vec<Block>,
}

/// Tape handles for a whole-stack forward.
#[derive(Debug, Clone)]
pub struct StackRecord {
    pub output: Var,
    /// Aux-loss node of every MoE layer that produced one.
    pub aux_losses: Vec<Var>,
    pub decisions: Vec<(usize, RoutingDecision)>,
}

/// Model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub hidden_dim: usize,
    pub inner_dim: usize,
    pub layers: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            inner_dim: 256,
            layers: 6,
        }
    }
}

impl BlockStack {
    /// Dense stack of random GELU FFN blocks.
    pub fn random_dense<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        Self {
            hidden_dim: dims.hidden_dim,
            blocks: (0..dims.layers)
                .map(|_| Block::Dense(Ffn::random(dims.hidden_dim, dims.inner_dim, rng)))
                .collect(),
        }
    }

    pub fn is_dense(&self) -> bool {
        self.blocks.iter().all(|b| matches!(b, Block::Dense(_)))
    }

    pub fn is_moe(&self) -> bool {
        self.blocks.iter().all(|b| matches!(b, Block::Moe(_)))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_dense() && !self.is_moe() {
            return Err(Error::Config("stack mixes dense and MoE blocks".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let h = match b {
                Block::Dense(f) => f.hidden_dim(),
                Block::Moe(m) => {
                    m.validate()?;
                    m.hidden_dim()
                }
            };
            if h != self.hidden_dim {
                return Err(shape_err(format!(
                    "block {i} has hidden width {h}, stack has {}",
                    self.hidden_dim
                )));
            }
        }
        Ok(())
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeLayer> {
        self.blocks.iter().filter_map(|b| match b {
            Block::Moe(m) => Some(m),
            Block::Dense(_) => None,
        })
    }

    pub fn record(
        &self,
        tape: &mut Tape,
        x: Var,
        batch: BatchShape,
        encoder_states: Option<&[Matrix]>,
        ctx: &mut ForwardCtx,
    ) -> Result<StackRecord> {
        if tape.value(x).cols() != self.hidden_dim {
            return Err(shape_err(format!(
                "tokens of width {} into stack of width {}",
                tape.value(x).cols(),
                self.hidden_dim
            )));
        }
        let mut h = x;
        let mut aux_losses = Vec::new();
        let mut decisions = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let prefix = format!("blocks.{i}");
            let y = match block {
                Block::Dense(f) => f.record(tape, h, ctx, &format!("{prefix}.dense"), true)?,
                Block::Moe(m) => {
                    let rec = m.record(tape, h, batch, encoder_states, ctx, &prefix)?;
                    if let Some(a) = rec.routing.aux_loss {
                        aux_losses.push(a);
                    }
                    decisions.push((m.layer_index, rec.routing.decision));
                    rec.output
                }
            };
            h = tape.add(h, y)?;
        }
        Ok(StackRecord {
            output: h,
            aux_losses,
            decisions,
        })
    }

    pub fn forward(&self, x: &Matrix, encoder_states: Option<&[Matrix]>) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::inference();
        let xv = tape.constant(x.clone());
        let rec = self.record(
            &mut tape,
            xv,
            BatchShape::single(x.rows()),
            encoder_states,
            &mut ctx,
        )?;
        Ok(tape.value(rec.output).clone())
    }

    /// Every parameter tensor in a fixed order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                Block::Dense(f) => {
                    for (n, m) in f.tensors() {
                        out.push(ParamRef {
                            name: format!("blocks.{i}.dense.{n}"),
                            group: ParamGroup::Dense,
                            trainable: true,
                            value: m,
                        });
                    }
                }
                Block::Moe(layer) => {
                    for (n, m) in layer.gate.tensors() {
                        out.push(ParamRef {
                            name: format!("blocks.{i}.gate.{n}"),
                            group: ParamGroup::Gate,
                            trainable: layer.gate.trainable,
                            value: m,
                        });
                    }
                    for (kind, group, experts) in [
                        ("shared", ParamGroup::Shared, &layer.shared),
                        ("routed", ParamGroup::Routed, &layer.routed),
                    ] {
                        for (j, e) in experts.iter().enumerate() {
                            for (n, m) in e.ffn.tensors() {
                                out.push(ParamRef {
                                    name: format!("blocks.{i}.{kind}.{j}.{n}"),
                                    group,
                                    trainable: e.trainable,
                                    value: m,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            match block {
                Block::Dense(f) => {
                    for (n, m) in f.tensors_mut() {
                        out.push(ParamMut {
                            name: format!("blocks.{i}.dense.{n}"),
                            group: ParamGroup::Dense,
                            trainable: true,
                            value: m,
                        });
                    }
                }
                Block::Moe(layer) => {
                    let gate_trainable = layer.gate.trainable;
                    for (n, m) in layer.gate.tensors_mut() {
                        out.push(ParamMut {
                            name: format!("blocks.{i}.gate.{n}"),
                            group: ParamGroup::Gate,
                            trainable: gate_trainable,
                            value: m,
                        });
                    }
                    for (kind, group, experts) in [
                        ("shared", ParamGroup::Shared, &mut layer.shared),
                        ("routed", ParamGroup::Routed, &mut layer.routed),
                    ] {
                        for (j, e) in experts.iter_mut().enumerate() {
                            let trainable = e.trainable;
                            for (n, m) in e.ffn.tensors_mut() {
                                out.push(ParamMut {
                                    name: format!("blocks.{i}.{kind}.{j}.{n}"),
                                    group,
                                    trainable,
                                    value: m,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Frobenius norm of all shared-expert weight matrices (biases excluded).
    pub fn shared_weight_norm(&self) -> f64 {
        self.moe_layers()
            .flat_map(|m| m.shared.iter())
            .map(|e| e.ffn.weight_norm_sq())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::gelu;
    use crate::routing::GateConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn expert(ffn: Ffn, role: ExpertRole) -> ExpertFfn {
        ExpertFfn {
            ffn,
            role,
            trainable: false,
        }
    }

    #[test]
    fn zero_ffn_is_zero_map() {
        let f = Ffn::zeros(4, 8);
        let x = Matrix::from_fn(3, 4, |i, j| (i + j) as f64 - 2.0);
        assert!(f.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_matches_hand_composition() {
        let f = Ffn::random(4, 6, &mut rng(1));
        let x = Matrix::from_fn(2, 4, |i, j| ((i * 4 + j) as f64 * 0.7).cos());
        let l1 = &f.layers[0];
        let l2 = &f.layers[1];
        let mut h = x.matmul(&l1.weight.transpose()).unwrap();
        for i in 0..h.rows() {
            for j in 0..h.cols() {
                h.set(i, j, h.get(i, j) + l1.bias.as_ref().unwrap().get(0, j));
            }
        }
        let h = gelu(&h);
        let mut y = h.matmul(&l2.weight.transpose()).unwrap();
        for i in 0..y.rows() {
            for j in 0..y.cols() {
                y.set(i, j, y.get(i, j) + l2.bias.as_ref().unwrap().get(0, j));
            }
        }
        assert!(f.forward(&x).unwrap().max_abs_diff(&y).unwrap() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let f = Ffn::zeros(4, 8);
        assert!(matches!(
            f.forward(&Matrix::zeros(1, 5)),
            Err(Error::Shape(_))
        ));
    }

    fn two_expert_layer(top_k: usize) -> MoeLayer {
        let mut r = rng(5);
        let dense = Ffn::random(4, 8, &mut r);
        let gate = Gate::init(
            GateConfig {
                top_k,
                ..GateConfig::default()
            },
            4,
            &mut r,
        )
        .unwrap();
        MoeLayer {
            shared: vec![expert(Ffn::zeros(4, 8), ExpertRole::Shared)],
            routed: vec![
                expert(dense.clone(), ExpertRole::Routed),
                expert(dense, ExpertRole::Routed),
            ],
            gate,
            layer_index: 0,
        }
    }

    #[test]
    fn forced_zero_weights_leave_only_shared() {
        let mut layer = two_expert_layer(2);
        layer.shared[0].ffn = Ffn::random(4, 8, &mut rng(9));
        let x = Matrix::from_fn(3, 4, |i, j| ((i + 2 * j) as f64).sin());
        let decision = RoutingDecision {
            top_k: 2,
            topk_idx: vec![0, 1, 0, 1, 0, 1],
            topk_weight: Matrix::zeros(3, 2),
            full_scores: Matrix::filled(3, 2, 0.5),
            aux_loss: None,
            self_attention_fallback: false,
        };
        let y = layer.forward_with_decision(&x, &decision).unwrap();
        assert_eq!(y, layer.shared[0].forward(&x).unwrap());
    }

    #[test]
    fn forced_single_selection_matches_hand_sum() {
        let mut layer = two_expert_layer(1);
        let mut r = rng(11);
        layer.shared[0].ffn = Ffn::random(4, 8, &mut r);
        layer.routed[1].ffn = Ffn::random(4, 8, &mut r);
        let x = Matrix::row_vector(&[0.3, -0.2, 0.9, 0.1]);
        let decision = RoutingDecision {
            top_k: 1,
            topk_idx: vec![0],
            topk_weight: Matrix::scalar(0.7),
            full_scores: Matrix::row_vector(&[0.7, 0.3]),
            aux_loss: None,
            self_attention_fallback: false,
        };
        let y = layer.forward_with_decision(&x, &decision).unwrap();
        let s = layer.shared[0].forward(&x).unwrap();
        let e0 = layer.routed[0].forward(&x).unwrap();
        for j in 0..4 {
            assert!((y.get(0, j) - (s.get(0, j) + 0.7 * e0.get(0, j))).abs() < 1e-15);
        }
    }

    #[test]
    fn similarity_of_clones_negation_and_orthogonal_outputs() {
        let layer = two_expert_layer(2);
        let probe = Matrix::from_fn(5, 4, |i, j| ((3 * i + j) as f64).sin());
        let s = expert_output_similarity(&layer, &probe).unwrap();
        assert_eq!(s[0].cosine, Some(1.0));

        let mut neg = layer.clone();
        for l in &mut neg.routed[1].ffn.layers[1..] {
            l.weight = l.weight.scale(-1.0);
            l.bias = l.bias.as_ref().map(|b| b.scale(-1.0));
        }
        let c = expert_output_similarity(&neg, &probe).unwrap()[0]
            .cosine
            .unwrap();
        assert!((c + 1.0).abs() < 1e-15);

        // rank-1 experts writing to orthogonal output axes
        let mut orth = layer.clone();
        for (e, axis) in [(0usize, 0usize), (1, 1)] {
            let w1 = Matrix::from_fn(8, 4, |i, j| if i == 0 && j == 0 { 1.0 } else { 0.0 });
            let w2 = Matrix::from_fn(4, 8, |i, j| if i == axis && j == 0 { 1.0 } else { 0.0 });
            orth.routed[e].ffn =
                Ffn::gelu(w1, Matrix::zeros(1, 8), w2, Matrix::zeros(1, 4)).unwrap();
        }
        let probe = Matrix::from_fn(3, 4, |i, _| 1.0 + i as f64);
        assert_eq!(
            expert_output_similarity(&orth, &probe).unwrap()[0].cosine,
            Some(0.0)
        );
    }

    #[test]
    fn zero_outputs_are_skipped() {
        let mut layer = two_expert_layer(2);
        layer.routed[1].ffn = Ffn::zeros(4, 8);
        let probe = Matrix::from_fn(2, 4, |i, j| (i + j) as f64);
        let s = expert_output_similarity(&layer, &probe).unwrap();
        assert_eq!(s[0].cosine, None);
        assert_eq!(s[0].skipped_tokens, 2);
    }

    #[test]
    fn stack_rejects_mixed_blocks() {
        let mut r = rng(2);
        let mut s = BlockStack::random_dense(
            ModelDims {
                hidden_dim: 4,
                inner_dim: 8,
                layers: 2,
            },
            &mut r,
        );
        assert!(s.validate().is_ok());
        s.blocks[1] = Block::Moe(two_expert_layer(2));
        assert!(s.validate().is_err());
    }
}

//! Dense→MoE conversion and the equivalence check that certifies it.
//!
//! A conversion replaces every dense FFN block with an MoE layer whose routed
//! experts are exact clones of that FFN, whose shared experts start at (or
//! near) zero, and whose gate is freshly initialized. With all routed experts
//! selected, the gate weights sum to one and the converted model reproduces
//! the dense model exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Block, BlockStack, ExpertFfn, ExpertRole, Ffn, FfnStructure, MoeLayer};
use crate::numkernel::{normal_matrix, Matrix};
use crate::routing::{Gate, GateConfig};

/// Default standard deviation of micro-noise shared-expert weights.
pub const MICRO_NOISE_SIGMA: f64 = 1e-4;

/// Deviation below which a non-zero result still counts as near-equivalent.
pub const NEAR_EQUIVALENCE_TOL: f64 = 1e-3;

/// How shared experts start out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
#[derive(Default)]
pub enum SharedInit {
    /// All weights and biases exactly zero.
    #[default]
    VerifyZero,
    /// Weights from N(0, σ²), biases zero.
    TrainMicroNoise {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    /// Copy of the dense FFN. Breaks equivalence (the block output doubles),
    /// so it exists only for control experiments.
    CloneDense,
}

fn default_sigma() -> f64 {
    MICRO_NOISE_SIGMA
}

/// Which parameters receive gradients after conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Gate and shared experts train; routed experts stay frozen clones.
    #[default]
    GateAndShared,
    /// Everything in the MoE layer trains.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConversionConfig {
    pub n_routed: usize,
    pub n_shared: usize,
    pub shared_init: SharedInit,
    pub freeze: FreezePolicy,
    /// Gate settings; `n_routed_experts` is overwritten by `n_routed`. Lives
    /// in its own config-file section, so it is not serialized here.
    #[serde(skip)]
    pub gate: GateConfig,
    /// Accepted only so configs can state it; any value other than 1 is rejected.
    pub routed_scaling: Option<f64>,
    pub seed: u64,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            n_routed: 2,
            n_shared: 1,
            shared_init: SharedInit::VerifyZero,
            freeze: FreezePolicy::GateAndShared,
            gate: GateConfig::default(),
            routed_scaling: None,
            seed: 0,
        }
    }
}

impl ConversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_routed == 0 {
            return Err(Error::Config(
                "conversion needs at least one routed expert".into(),
            ));
        }
        if let Some(s) = self.routed_scaling {
            if s != 1.0 {
                return Err(Error::Config(format!(
                    "routed_scaling {s}: cloned experts are never rescaled"
                )));
            }
        }
        if let SharedInit::TrainMicroNoise { sigma } = self.shared_init {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!(
                    "micro-noise sigma {sigma} must be positive"
                )));
            }
        }
        self.gate_config().validate()
    }

    /// Gate config with the routed-expert count filled in.
    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            n_routed_experts: self.n_routed,
            ..self.gate.clone()
        }
    }
}

/// Lists every way `template` differs structurally from `dense`. Empty means OK.
pub fn check_structure(dense: &Ffn, template: &Ffn) -> Vec<String> {
    diff_structure(&dense.structure(), &template.structure())
}

fn diff_structure(dense: &FfnStructure, template: &FfnStructure) -> Vec<String> {
    let mut diffs = Vec::new();
    if dense.activation != template.activation {
        diffs.push(format!(
            "activation: dense {:?}, expert {:?}",
            dense.activation, template.activation
        ));
    }
    if dense.layer_count != template.layer_count {
        diffs.push(format!(
            "layer count: dense {}, expert {}",
            dense.layer_count, template.layer_count
        ));
    }
    for (i, (d, t)) in dense
        .weight_shapes
        .iter()
        .zip(&template.weight_shapes)
        .enumerate()
    {
        if d != t {
            diffs.push(format!("layer {i} weight shape: dense {d:?}, expert {t:?}"));
        }
    }
    for (i, (d, t)) in dense.biases.iter().zip(&template.biases).enumerate() {
        if d != t {
            diffs.push(format!("layer {i} bias: dense {d}, expert {t}"));
        }
    }
    diffs
}

/// `n` deep copies of `dense`, unscaled.
pub fn clone_routed(dense: &Ffn, n: usize) -> Result<Vec<ExpertFfn>> {
    if n == 0 {
        return Err(Error::Argument("cannot clone into zero experts".into()));
    }
    Ok((0..n)
        .map(|_| ExpertFfn {
            ffn: dense.clone(),
            role: ExpertRole::Routed,
            trainable: false,
        })
        .collect())
}

/// A shared expert of the given dims in the requested starting state.
pub fn init_shared<R: rand::Rng>(dense: &Ffn, mode: SharedInit, rng: &mut R) -> Result<ExpertFfn> {
    let (hidden, inner) = (dense.hidden_dim(), dense.inner_dim());
    let ffn = match mode {
        SharedInit::VerifyZero => Ffn::zeros(hidden, inner),
        SharedInit::TrainMicroNoise { sigma } => {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::Argument(format!("micro-noise sigma {sigma}")));
            }
            Ffn::micro_noise(hidden, inner, sigma, rng)
        }
        SharedInit::CloneDense => dense.clone(),
    };
    Ok(ExpertFfn {
        ffn,
        role: ExpertRole::Shared,
        trainable: true,
    })
}

/// Converts every dense block. Aborts with the structure diff if any block's
/// expert template would not match its dense FFN.
pub fn convert_model(dense: &BlockStack, cfg: &ConversionConfig) -> Result<BlockStack> {
    cfg.validate()?;
    if !dense.is_dense() {
        return Err(Error::Precondition(
            "conversion input must be a dense stack".into(),
        ));
    }
    dense.validate()?;
    let gate_cfg = cfg.gate_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut blocks = Vec::with_capacity(dense.blocks.len());
    for (i, block) in dense.blocks.iter().enumerate() {
        let Block::Dense(ffn) = block else {
            unreachable!("checked dense above")
        };
        let mut routed = clone_routed(ffn, cfg.n_routed)?;
        let mut diffs = Vec::new();
        for e in &routed {
            diffs.extend(
                check_structure(ffn, &e.ffn)
                    .into_iter()
                    .map(|d| format!("block {i}: {d}")),
            );
        }
        if !diffs.is_empty() {
            return Err(Error::Structure(diffs));
        }
        debug_assert!(routed.iter().all(|e| e.ffn == *ffn));
        let gate = Gate::init(gate_cfg.clone(), dense.hidden_dim, &mut rng)?;
        let mut shared = Vec::with_capacity(cfg.n_shared);
        for _ in 0..cfg.n_shared {
            shared.push(init_shared(ffn, cfg.shared_init, &mut rng)?);
        }
        if cfg.freeze == FreezePolicy::Full {
            routed.iter_mut().for_each(|e| e.trainable = true);
        }
        blocks.push(Block::Moe(MoeLayer {
            shared,
            routed,
            gate,
            layer_index: i,
        }));
    }
    Ok(BlockStack {
        hidden_dim: dense.hidden_dim,
        blocks,
    })
}

/// [`check_structure`] as a gate: `Err(Structure)` listing every mismatch.
pub fn require_structure(dense: &Ffn, template: &Ffn) -> Result<()> {
    let diffs = check_structure(dense, template);
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Structure(diffs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Equivalent,
    NearEquivalent,
    NotEquivalent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub max_abs_dev: f64,
    pub verdict: Verdict,
}

impl Certification {
    pub fn from_deviation(max_abs_dev: f64) -> Self {
        let verdict = if max_abs_dev == 0.0 {
            Verdict::Equivalent
        } else if max_abs_dev < NEAR_EQUIVALENCE_TOL {
            Verdict::NearEquivalent
        } else {
            Verdict::NotEquivalent
        };
        Self {
            max_abs_dev,
            verdict,
        }
    }
}

/// Unit-scale probe batches of `tokens` rows each, N(0, 1) entries.
pub fn probe_batches(count: usize, tokens: usize, hidden: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| normal_matrix(tokens, hidden, 1.0, &mut rng))
        .collect()
}

/// Worst `|dense(x) − moe(x)|` over all probes and positions.
///
/// Refuses unless every MoE layer selects all of its routed experts, since only
/// then do the selected gate weights sum to one.
pub fn verify_equivalence(dense: &BlockStack, moe: &BlockStack, probes: &[Matrix]) -> Result<f64> {
    if !dense.is_dense() || !moe.is_moe() {
        return Err(Error::Precondition(
            "verification compares a dense stack against an MoE stack".into(),
        ));
    }
    if dense.blocks.len() != moe.blocks.len() || dense.hidden_dim != moe.hidden_dim {
        return Err(Error::Precondition(
            "stacks differ in depth or width".into(),
        ));
    }
    moe.validate()?;
    for (i, layer) in moe.moe_layers().enumerate() {
        let g = &layer.gate.config;
        if !g.selects_all() {
            return Err(Error::Precondition(format!(
                "layer {i} routes top-{} of {} experts; equivalence needs every expert selected \
                 so the gate weights sum to 1",
                g.top_k, g.n_routed_experts
            )));
        }
    }
    if probes.is_empty() {
        return Err(Error::Argument("no probe batches".into()));
    }
    let mut worst: f64 = 0.0;
    for p in probes {
        let a = dense.forward(p, None)?;
        let b = moe.forward(p, None)?;
        let d = a.max_abs_diff(&b)?;
        if d.is_nan() {
            return Err(Error::Evaluation("deviation is NaN".into()));
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

/// [`verify_equivalence`] mapped onto a verdict.
pub fn certify(dense: &BlockStack, moe: &BlockStack, probes: &[Matrix]) -> Result<Certification> {
    verify_equivalence(dense, moe, probes).map(Certification::from_deviation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Linear, ModelDims};

    fn small_dense(seed: u64) -> BlockStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BlockStack::random_dense(
            ModelDims {
                hidden_dim: 8,
                inner_dim: 16,
                layers: 3,
            },
            &mut rng,
        )
    }

    fn first_ffn(s: &BlockStack) -> &Ffn {
        match &s.blocks[0] {
            Block::Dense(f) => f,
            Block::Moe(_) => panic!("dense expected"),
        }
    }

    #[test]
    fn matching_template_has_no_diffs() {
        let d = small_dense(1);
        let f = first_ffn(&d);
        assert!(check_structure(f, &f.clone()).is_empty());
    }

    #[test]
    fn gated_template_reports_layer_count_and_activation() {
        let d = small_dense(1);
        let f = first_ffn(&d);
        let gated = Ffn {
            activation: Activation::SiluGated,
            layers: vec![
                Linear {
                    weight: Matrix::zeros(16, 8),
                    bias: None,
                },
                Linear {
                    weight: Matrix::zeros(16, 8),
                    bias: None,
                },
                Linear {
                    weight: Matrix::zeros(8, 16),
                    bias: None,
                },
            ],
        };
        let diffs = check_structure(f, &gated);
        assert!(diffs.iter().any(|d| d.starts_with("activation")));
        assert!(diffs.iter().any(|d| d.starts_with("layer count")));
    }

    #[test]
    fn bias_free_template_reports_bias() {
        let d = small_dense(1);
        let f = first_ffn(&d);
        let mut t = f.clone();
        t.layers[1].bias = None;
        let diffs = check_structure(f, &t);
        assert_eq!(
            diffs,
            vec!["layer 1 bias: dense true, expert false".to_string()]
        );
    }

    #[test]
    fn clones_are_bitwise_and_independent() {
        let d = small_dense(2);
        let f = first_ffn(&d);
        let mut c = clone_routed(f, 2).unwrap();
        assert_eq!(c[0].ffn.layers[0].weight, f.layers[0].weight);
        assert!(clone_routed(f, 0).is_err());
        c[0].ffn.layers[0].weight.set(0, 0, 42.0);
        assert_eq!(c[1].ffn, *f);
        assert_ne!(c[0].ffn, *f);
    }

    #[test]
    fn micro_noise_has_requested_spread() {
        let d = small_dense(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let big = Ffn::random(64, 256, &mut rng);
        let e = init_shared(&big, SharedInit::TrainMicroNoise { sigma: 1e-4 }, &mut rng).unwrap();
        let w = e.ffn.layers[0].weight.data();
        let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!((0.5e-4..1.5e-4).contains(&std), "{std}");
        assert!(e.trainable);
        assert!(e.ffn.layers.iter().all(|l| l
            .bias
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|&b| b == 0.0)));
        let z = init_shared(first_ffn(&d), SharedInit::VerifyZero, &mut rng).unwrap();
        assert!(z
            .ffn
            .tensors()
            .iter()
            .all(|(_, m)| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn conversion_counts_and_flags() {
        let d = small_dense(5);
        let cfg = ConversionConfig::default();
        let m = convert_model(&d, &cfg).unwrap();
        assert_eq!(m.blocks.len(), 3);
        let ffn = first_ffn(&d).param_count();
        let gate: usize = m.moe_layers().map(|l| l.gate.param_count()).sum();
        assert_eq!(
            m.param_count(),
            d.param_count() + 3 * (2 + 1 - 1) * ffn + gate
        );
        for p in m.params() {
            let routed = p.name.contains(".routed.");
            assert_eq!(p.trainable, !routed, "{}", p.name);
        }
        assert_eq!(convert_model(&d, &cfg).unwrap(), m);
    }

    #[test]
    fn scaling_is_rejected_and_sigma_checked() {
        let d = small_dense(5);
        let cfg = ConversionConfig {
            routed_scaling: Some(0.5),
            ..ConversionConfig::default()
        };
        assert!(matches!(convert_model(&d, &cfg), Err(Error::Config(_))));
        let cfg = ConversionConfig {
            shared_init: SharedInit::TrainMicroNoise { sigma: 0.0 },
            ..ConversionConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn verify_zero_is_exactly_equivalent() {
        let d = small_dense(6);
        let m = convert_model(&d, &ConversionConfig::default()).unwrap();
        let probes = probe_batches(4, 5, 8, 7);
        let c = certify(&d, &m, &probes).unwrap();
        assert_eq!(c.max_abs_dev, 0.0);
        assert_eq!(c.verdict, Verdict::Equivalent);
    }

    #[test]
    fn top1_is_refused() {
        let d = small_dense(6);
        let mut cfg = ConversionConfig::default();
        cfg.gate.top_k = 1;
        let m = convert_model(&d, &cfg).unwrap();
        let probes = probe_batches(1, 2, 8, 7);
        assert!(matches!(
            verify_equivalence(&d, &m, &probes),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ConversionConfig {
            shared_init: SharedInit::TrainMicroNoise { sigma: 2e-4 },
            ..ConversionConfig::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ConversionConfig>(&s).unwrap(), cfg);
        let parsed: ConversionConfig =
            serde_json::from_str(r#"{"shared_init":{"mode":"train_micro_noise"}}"#).unwrap();
        assert_eq!(
            parsed.shared_init,
            SharedInit::TrainMicroNoise { sigma: 1e-4 }
        );
    }
}

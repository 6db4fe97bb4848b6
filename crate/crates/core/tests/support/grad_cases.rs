//! Gradient-check cases shared by the gradient suite and the acceptance run.
//! Each returns the worst relative error over ten seeded instances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use moelab::convert::{convert_model, ConversionConfig, FreezePolicy, SharedInit};
use moelab::model::{BlockStack, ForwardCtx, ModelDims};
use moelab::numkernel::{grad_check, mha, normal_matrix, AttentionWeights, Matrix, Tape, Var};
use moelab::precision::PrecisionPolicy;
use moelab::routing::{BatchShape, GateConfig, GateKind};
use moelab::Result;

pub const STEP: f64 = 1e-5;
const SEEDS: std::ops::Range<u64> = 0..10;

/// `Σ weights ⊙ y`, a scalar whose gradient reaches every output entry.
fn weighted_sum(tape: &mut Tape, y: Var, weights: &Matrix) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn check_unary(op: fn(&mut Tape, Var) -> Var, scale: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal_matrix(3, 5, scale, &mut rng);
        let c = normal_matrix(3, 5, 1.0, &mut rng);
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(Matrix::from_vec(3, 5, p.to_vec())?, true);
            let y = op(&mut tape, x);
            let loss = weighted_sum(&mut tape, y, &c)?;
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).get(0, 0), g.wrt(&tape, x).data().to_vec()))
        };
        worst = worst.max(grad_check(f, x.data(), STEP)?);
    }
    Ok(worst)
}

pub fn gelu() -> Result<f64> {
    check_unary(|t, x| t.gelu(x), 2.0)
}

pub fn softmax() -> Result<f64> {
    check_unary(|t, x| t.softmax(x), 3.0)
}

pub fn matmul() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = normal_matrix(4, 3, 1.0, &mut rng);
        let b = normal_matrix(3, 5, 1.0, &mut rng);
        let c = normal_matrix(4, 5, 1.0, &mut rng);
        let point: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.leaf(Matrix::from_vec(4, 3, p[..12].to_vec())?, true);
            let b = tape.leaf(Matrix::from_vec(3, 5, p[12..].to_vec())?, true);
            let y = tape.matmul(a, b)?;
            let loss = weighted_sum(&mut tape, y, &c)?;
            let g = tape.backward(loss)?;
            let mut grad = g.wrt(&tape, a).data().to_vec();
            grad.extend_from_slice(g.wrt(&tape, b).data());
            Ok((tape.value(loss).get(0, 0), grad))
        };
        worst = worst.max(grad_check(f, &point, STEP)?);
    }
    Ok(worst)
}

/// Cross-attention with key/value width different from the query width;
/// gradient with respect to the queries, the encoder states and every
/// projection.
pub fn attention() -> Result<f64> {
    let mut worst: f64 = 0.0;
    let (embed, kdim, heads) = (4, 3, 2);
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = AttentionWeights::random(embed, kdim, kdim, &mut rng);
        let q = normal_matrix(3, embed, 1.0, &mut rng);
        let kv = normal_matrix(5, kdim, 1.0, &mut rng);
        let c = normal_matrix(3, embed, 1.0, &mut rng);
        let shapes: Vec<(usize, usize)> = [q.shape(), kv.shape()]
            .into_iter()
            .chain(w.tensors().iter().map(|(_, m)| m.shape()))
            .collect();
        let point: Vec<f64> = [&q, &kv]
            .into_iter()
            .chain(w.tensors().iter().map(|(_, m)| *m))
            .flat_map(|m| m.data().to_vec())
            .collect();
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let mut off = 0;
            let mut leaves = Vec::new();
            for &(r, cl) in &shapes {
                let m = Matrix::from_vec(r, cl, p[off..off + r * cl].to_vec())?;
                off += r * cl;
                leaves.push(tape.leaf(m, true));
            }
            let vars = moelab::numkernel::AttentionVars {
                q_weight: leaves[2],
                q_bias: leaves[3],
                k_weight: leaves[4],
                k_bias: leaves[5],
                v_weight: leaves[6],
                v_bias: leaves[7],
                out_weight: leaves[8],
                out_bias: leaves[9],
            };
            let y = mha(&mut tape, leaves[0], leaves[1], leaves[1], heads, &vars)?;
            let loss = weighted_sum(&mut tape, y, &c)?;
            let g = tape.backward(loss)?;
            let grad = leaves
                .iter()
                .flat_map(|&v| g.wrt(&tape, v).data().to_vec())
                .collect();
            Ok((tape.value(loss).get(0, 0), grad))
        };
        worst = worst.max(grad_check(f, &point, STEP)?);
    }
    Ok(worst)
}

/// Task MSE plus auxiliary loss of a one-layer MoE stack with a top-1 MLP
/// gate, with respect to every parameter (routed experts unfrozen).
pub fn moe_layer_loss() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dense = BlockStack::random_dense(
            ModelDims {
                hidden_dim: 4,
                inner_dim: 6,
                layers: 1,
            },
            &mut rng,
        );
        let cfg = ConversionConfig {
            shared_init: SharedInit::TrainMicroNoise { sigma: 0.1 },
            freeze: FreezePolicy::Full,
            gate: GateConfig {
                top_k: 1,
                gate_init_std: Some(0.5),
                mlp_hidden_dim: 5,
                aux_loss_alpha: 0.1,
                ..GateConfig::with_kind(GateKind::Mlp)
            },
            seed,
            ..ConversionConfig::default()
        };
        let mut template = convert_model(&dense, &cfg)?;
        // distinguish the two routed clones so routing matters
        for p in template.params_mut() {
            if p.name.contains("routed.1") {
                p.value.data_mut().iter_mut().for_each(|v| *v *= 0.7);
            }
        }
        let x = normal_matrix(6, 4, 1.0, &mut rng);
        let target = normal_matrix(6, 4, 1.0, &mut rng);
        let shapes: Vec<(String, usize)> = template
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.data().len()))
            .collect();
        let point: Vec<f64> = template
            .params()
            .iter()
            .flat_map(|p| p.value.data().to_vec())
            .collect();
        let f = |p: &[f64]| {
            let mut stack = template.clone();
            let mut off = 0;
            for (param, (_, n)) in stack.params_mut().into_iter().zip(&shapes) {
                param.value.data_mut().copy_from_slice(&p[off..off + n]);
                off += n;
            }
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::training(PrecisionPolicy::default());
            let xv = tape.constant(x.clone());
            let rec = stack.record(&mut tape, xv, BatchShape::single(6), None, &mut ctx)?;
            let t = tape.constant(target.clone());
            let mut loss = tape.mse(rec.output, t)?;
            for &a in &rec.aux_losses {
                loss = tape.add(loss, a)?;
            }
            let g = tape.backward(loss)?;
            let bound: std::collections::HashMap<_, _> = ctx.bindings().iter().cloned().collect();
            let mut grad = Vec::with_capacity(p.len());
            for (name, n) in &shapes {
                let v = bound[name];
                grad.extend_from_slice(g.wrt(&tape, v).data());
                assert_eq!(g.wrt(&tape, v).data().len(), *n);
            }
            Ok((tape.value(loss).get(0, 0), grad))
        };
        worst = worst.max(grad_check(f, &point, STEP)?);
    }
    Ok(worst)
}

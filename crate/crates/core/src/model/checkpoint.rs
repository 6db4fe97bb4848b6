//! Checkpoints: `manifest.json` describing the stack plus `params.bin`, the
//! little-endian parameter values in manifest order.
//!
//! A tensor whose values all sit on the binary32 grid is stored as `f32`;
//! anything else (a wide master that has drifted off the grid during
//! training) is stored as `f64`, so the round trip is always bit-exact.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Block, BlockStack, ExpertFfn, ExpertRole, Ffn, FfnStructure, MoeLayer};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::precision::PrecisionPolicy;
use crate::routing::{Gate, GateConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_TAG: &str = "moelab-checkpoint/1";

/// Run metadata stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub precision: PrecisionPolicy,
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    dtype: Dtype,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExpertSpec {
    ffn: FfnStructure,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum BlockSpec {
    Dense {
        ffn: FfnStructure,
    },
    Moe {
        layer_index: usize,
        gate: GateConfig,
        gate_trainable: bool,
        shared: Vec<ExpertSpec>,
        routed: Vec<ExpertSpec>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    hidden_dim: usize,
    meta: CheckpointMeta,
    blocks: Vec<BlockSpec>,
    tensors: Vec<TensorEntry>,
}

fn expert_spec(e: &ExpertFfn) -> ExpertSpec {
    ExpertSpec {
        ffn: e.ffn.structure(),
        trainable: e.trainable,
    }
}

fn on_f32_grid(m: &Matrix) -> bool {
    m.data()
        .iter()
        .all(|&v| (v as f32 as f64).to_bits() == v.to_bits())
}

/// Writes `stack` into directory `dir`, creating it if needed.
pub fn save_checkpoint(dir: &Path, stack: &BlockStack, meta: &CheckpointMeta) -> Result<()> {
    stack.validate()?;
    let blocks = stack
        .blocks
        .iter()
        .map(|b| match b {
            Block::Dense(f) => BlockSpec::Dense { ffn: f.structure() },
            Block::Moe(m) => BlockSpec::Moe {
                layer_index: m.layer_index,
                gate: m.gate.config.clone(),
                gate_trainable: m.gate.trainable,
                shared: m.shared.iter().map(expert_spec).collect(),
                routed: m.routed.iter().map(expert_spec).collect(),
            },
        })
        .collect();
    let mut tensors = Vec::new();
    let mut bin = Vec::new();
    for p in stack.params() {
        let dtype = if on_f32_grid(p.value) {
            Dtype::F32
        } else {
            Dtype::F64
        };
        tensors.push(TensorEntry {
            name: p.name,
            rows: p.value.rows(),
            cols: p.value.cols(),
            dtype,
            offset: bin.len() as u64,
        });
        for &v in p.value.data() {
            match dtype {
                Dtype::F32 => bin.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => bin.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        hidden_dim: stack.hidden_dim,
        meta: meta.clone(),
        blocks,
        tensors,
    };
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    fs::write(dir.join(PARAMS_FILE), bin)?;
    Ok(())
}

fn build_expert(spec: &ExpertSpec, role: ExpertRole) -> Result<ExpertFfn> {
    Ok(ExpertFfn {
        ffn: Ffn::from_structure(&spec.ffn)?,
        role,
        trainable: spec.trainable,
    })
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(BlockStack, CheckpointMeta)> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    };
    let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!(
            "unknown format {:?}",
            manifest.format
        )));
    }
    let bin = read(PARAMS_FILE)?;
    // gate tensors are overwritten below; the rng only shapes the skeleton
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    for spec in &manifest.blocks {
        blocks.push(match spec {
            BlockSpec::Dense { ffn } => Block::Dense(Ffn::from_structure(ffn)?),
            BlockSpec::Moe {
                layer_index,
                gate,
                gate_trainable,
                shared,
                routed,
            } => {
                let mut g = Gate::init(gate.clone(), manifest.hidden_dim, &mut rng)?;
                g.trainable = *gate_trainable;
                Block::Moe(MoeLayer {
                    shared: shared
                        .iter()
                        .map(|s| build_expert(s, ExpertRole::Shared))
                        .collect::<Result<_>>()?,
                    routed: routed
                        .iter()
                        .map(|s| build_expert(s, ExpertRole::Routed))
                        .collect::<Result<_>>()?,
                    gate: g,
                    layer_index: *layer_index,
                })
            }
        });
    }
    let mut stack = BlockStack {
        hidden_dim: manifest.hidden_dim,
        blocks,
    };
    let mut params = stack.params_mut();
    if params.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, structure implies {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    for (p, t) in params.iter_mut().zip(&manifest.tensors) {
        if p.name != t.name || p.value.shape() != (t.rows, t.cols) {
            return Err(Error::Checkpoint(format!(
                "tensor {} ({}×{}) does not match expected {} {:?}",
                t.name,
                t.rows,
                t.cols,
                p.name,
                p.value.shape()
            )));
        }
        let w = t.dtype.width();
        let start = t.offset as usize;
        let end = start + t.rows * t.cols * w;
        let bytes = bin.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("{} runs past end of {PARAMS_FILE}", t.name))
        })?;
        for (dst, chunk) in p.value.data_mut().iter_mut().zip(bytes.chunks_exact(w)) {
            *dst = match t.dtype {
                Dtype::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
                Dtype::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
            };
        }
    }
    drop(params);
    stack.validate()?;
    Ok((stack, manifest.meta))
}

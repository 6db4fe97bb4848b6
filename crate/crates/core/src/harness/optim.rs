//! Warmup-cosine schedule and AdamW applied through the precision policy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamGroup;
use crate::numkernel::Matrix;
use crate::precision::{apply_update, GroupLrMultipliers, MasterFormat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

/// Linear warmup to `lr`, then cosine decay to zero at `total_steps`.
pub fn lr_schedule(t: usize, s: &Schedule) -> f64 {
    if t < s.warmup_steps {
        return s.lr * t as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.lr;
    }
    let progress = ((t - s.warmup_steps) as f64 / span as f64).min(1.0);
    s.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Matrix,
    v: Matrix,
    t: u64,
}

/// Per-parameter first and second moments, kept at working precision.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Update count of one parameter.
    pub fn steps_of(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.t)
    }
}

/// A parameter together with its gradient for one optimizer step.
pub struct ParamUpdate<'a> {
    pub name: &'a str,
    pub group: ParamGroup,
    pub value: &'a mut Matrix,
    pub grad: &'a Matrix,
}

pub(crate) fn group_multiplier(m: &GroupLrMultipliers, g: ParamGroup) -> f64 {
    match g {
        ParamGroup::Gate => m.gate,
        ParamGroup::Shared => m.shared,
        ParamGroup::Routed | ParamGroup::Dense => m.routed,
    }
}

/// One AdamW step over `params`. If any gradient is non-finite the whole step
/// is skipped and an evaluation error names the offending parameter; neither
/// parameters nor moments change.
pub fn adamw_step(
    params: &mut [ParamUpdate<'_>],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    lr_t: f64,
    multipliers: &GroupLrMultipliers,
    master: MasterFormat,
) -> Result<()> {
    if !(lr_t >= 0.0) {
        return Err(Error::Argument(format!("learning rate {lr_t}")));
    }
    for p in params.iter() {
        if p.value.shape() != p.grad.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for {} of shape {:?}",
                p.grad.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if !p.grad.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite gradient for {}; step skipped",
                p.name
            )));
        }
    }
    let (b1, b2) = cfg.betas;
    for p in params.iter_mut() {
        let (rows, cols) = p.value.shape();
        let mo = state
            .moments
            .entry(p.name.to_owned())
            .or_insert_with(|| Moments {
                m: Matrix::zeros(rows, cols),
                v: Matrix::zeros(rows, cols),
                t: 0,
            });
        mo.t += 1;
        let c1 = 1.0 - b1.powi(mo.t as i32);
        let c2 = 1.0 - b2.powi(mo.t as i32);
        let lr = lr_t * group_multiplier(multipliers, p.group);
        let mut delta = Matrix::zeros(rows, cols);
        let w = p.value.data();
        for (i, d) in delta.data_mut().iter_mut().enumerate() {
            let g = p.grad.data()[i];
            let m = &mut mo.m.data_mut()[i];
            *m = b1 * *m + (1.0 - b1) * g;
            let m_hat = *m / c1;
            let v = &mut mo.v.data_mut()[i];
            *v = b2 * *v + (1.0 - b2) * g * g;
            let v_hat = *v / c2;
            *d = -lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w[i]);
        }
        apply_update(p.value, &delta, master)?;
    }
    Ok(())
}

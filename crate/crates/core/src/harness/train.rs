//! The training loop: sample a task batch, regress the MoE stack onto the
//! task teacher, step AdamW over the trainable set and log routing.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{LabConfig, TaskOrder};
use super::optim::{adamw_step, lr_schedule, OptimizerState, ParamUpdate};
use super::tasks::{derive_seed, gen_task_batch, purpose, TaskSpec, N_TASKS};
use crate::convert::convert_model;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, BlockStack, CheckpointMeta, ForwardCtx};
use crate::numkernel::{Matrix, Tape};
use crate::routing::{BatchShape, GateKind, RoutingLog};
use crate::telemetry::{build_report, homogenization_report, write_csv, Report, UtilizationRecord};

pub const UTILIZATION_FILE: &str = "utilization.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const NAN_DUMP_DIR: &str = "nan_dump";
const LOSSES_HEADER: &str = "step,task,total,mse,aux,lr,shared_weight_norm";

/// Tokens used to probe expert similarity in the final report.
const PROBE_TOKENS: usize = 64;

/// Loss decomposition of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub task: usize,
    pub total: f64,
    pub mse: f64,
    /// Sum of the per-layer auxiliary losses.
    pub aux: f64,
    pub lr: f64,
    /// Shared-expert weight norm after the step's update.
    pub shared_weight_norm: f64,
}

/// Stateful trainer; [`train`] drives it for a whole run.
#[derive(Debug)]
pub struct Trainer {
    pub stack: BlockStack,
    pub cfg: LabConfig,
    tasks: Vec<TaskSpec>,
    optimizer: OptimizerState,
    step: usize,
    /// Seeds the data and task-order streams; differs from the task seed
    /// only while pretraining.
    stream_seed: u64,
    task_rng: ChaCha8Rng,
    routing: RoutingLog,
    pub records: Vec<UtilizationRecord>,
    pub losses: Vec<LossRow>,
    /// Steps whose update was skipped because of a non-finite gradient.
    pub skipped_steps: Vec<usize>,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    /// Prepares `stack` for training; masters are rounded onto the storage
    /// grid of the precision policy.
    pub fn new(mut stack: BlockStack, cfg: LabConfig) -> Result<Self> {
        cfg.validate()?;
        stack.validate()?;
        for p in stack.params_mut() {
            *p.value = cfg.precision.store(p.value);
        }
        let encoder_dim = cfg.gate.encoder_dim;
        let tasks = TaskSpec::all(
            cfg.train.seed,
            stack.hidden_dim,
            cfg.model.inner_dim,
            encoder_dim,
            &cfg.train.tasks,
        )?;
        let task_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, purpose::SCHEDULE, 0));
        Ok(Self {
            stack,
            tasks,
            optimizer: OptimizerState::new(),
            step: 0,
            stream_seed: cfg.train.seed,
            task_rng,
            routing: RoutingLog::enabled(),
            records: Vec::new(),
            losses: Vec::new(),
            skipped_steps: Vec::new(),
            dump_dir: None,
            cfg,
        })
    }

    fn with_stream_seed(mut self, seed: u64) -> Self {
        self.stream_seed = seed;
        self.task_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose::SCHEDULE, 0));
        self
    }

    /// Where to write a checkpoint if the loss goes non-finite.
    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = Some(dir.into());
        self
    }

    /// Steps completed so far.
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    /// Changes the aux-loss coefficient of every MoE layer.
    pub fn set_aux_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(alpha >= 0.0) {
            return Err(Error::Argument(format!("aux alpha {alpha}")));
        }
        self.cfg.gate.aux_loss_alpha = alpha;
        for b in &mut self.stack.blocks {
            if let crate::model::Block::Moe(m) = b {
                m.gate.config.aux_loss_alpha = alpha;
            }
        }
        Ok(())
    }

    fn next_task(&mut self) -> usize {
        match self.cfg.train.task_order {
            TaskOrder::Random => self.task_rng.random_range(1..=N_TASKS),
            TaskOrder::RoundRobin => (self.step - 1) % N_TASKS + 1,
        }
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<&LossRow> {
        self.step += 1;
        let t = self.step;
        let task_id = self.next_task();
        let tc = &self.cfg.train;
        let batch = gen_task_batch(
            &self.tasks[task_id - 1],
            tc.tokens_per_step,
            derive_seed(self.stream_seed, purpose::DATA, t as u64),
        )?;
        let shape = BatchShape {
            bsz: tc.sequences_per_step,
            seq_len: tc.tokens_per_step / tc.sequences_per_step,
        };
        let enc = [batch.instruction];
        let encoder_states = (self.cfg.gate.kind == GateKind::CrossAttention).then_some(&enc[..]);

        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::training(self.cfg.precision);
        let x = tape.constant(batch.tokens);
        let rec = self
            .stack
            .record(&mut tape, x, shape, encoder_states, &mut ctx)?;
        let target = tape.constant(batch.targets);
        let mse = tape.mse(rec.output, target)?;
        let mut aux = None;
        for &a in &rec.aux_losses {
            aux = Some(match aux {
                Some(acc) => tape.add(acc, a)?,
                None => a,
            });
        }
        let total = match aux {
            Some(a) => tape.add(mse, a)?,
            None => mse,
        };
        let mse_v = tape.value(mse).get(0, 0);
        let total_v = tape.value(total).get(0, 0);
        let aux_v = aux.map_or(0.0, |a| tape.value(a).get(0, 0));
        if !total_v.is_finite() {
            if let Some(dir) = &self.dump_dir {
                let meta = CheckpointMeta {
                    precision: self.cfg.precision,
                    seed: self.cfg.train.seed,
                    step: t as u64 - 1,
                };
                save_checkpoint(dir, &self.stack, &meta)?;
            }
            return Err(Error::NonFiniteLoss { step: t });
        }
        for (layer, d) in &rec.decisions {
            self.routing.record(d, *layer, t);
        }

        let lr = lr_schedule(t, &self.cfg.train.schedule());
        if tape.requires_grad(total) {
            let grads = tape.backward(total)?;
            let bound: HashMap<&str, _> = ctx
                .bindings()
                .iter()
                .map(|(n, v)| (n.as_str(), *v))
                .collect();
            let mut params = self.stack.params_mut();
            let grad_values: Vec<Option<Matrix>> = params
                .iter()
                .map(|p| bound.get(p.name.as_str()).map(|&v| grads.wrt(&tape, v)))
                .collect();
            let mut updates: Vec<ParamUpdate<'_>> = params
                .iter_mut()
                .zip(&grad_values)
                .filter(|(p, _)| p.trainable)
                .filter_map(|(p, g)| {
                    g.as_ref().map(|g| ParamUpdate {
                        name: &p.name,
                        group: p.group,
                        value: &mut *p.value,
                        grad: g,
                    })
                })
                .collect();
            match adamw_step(
                &mut updates,
                &mut self.optimizer,
                &self.cfg.train.adam(),
                lr,
                &self.cfg.precision.lr_multipliers,
                self.cfg.precision.master_format,
            ) {
                Ok(()) => {}
                Err(Error::Evaluation(_)) => self.skipped_steps.push(t),
                Err(e) => return Err(e),
            }
        }

        if t.is_multiple_of(self.cfg.telemetry.log_interval) {
            self.flush();
        }
        self.losses.push(LossRow {
            step: t,
            task: task_id,
            total: total_v,
            mse: mse_v,
            aux: aux_v,
            lr,
            shared_weight_norm: self.stack.shared_weight_norm(),
        });
        Ok(self.losses.last().expect("just pushed"))
    }

    /// Moves buffered routing counts into utilization records at the current step.
    pub fn flush(&mut self) {
        let step = self.step;
        for (layer, log) in self.routing.take() {
            self.records
                .push(UtilizationRecord::from_log(step, layer, log));
        }
    }

    pub fn run(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    /// Health report over the records so far, with a similarity probe drawn
    /// from the first task.
    pub fn report(&self) -> Result<Report> {
        let probe = gen_task_batch(
            &self.tasks[0],
            PROBE_TOKENS,
            derive_seed(self.cfg.train.seed, purpose::PROBE, 0),
        )?;
        let homog = if self.cfg.conversion.n_routed >= 2 {
            homogenization_report(&self.stack, &probe.tokens)?
        } else {
            Vec::new()
        };
        build_report(&self.records, &self.cfg.telemetry, homog)
    }
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub stack: BlockStack,
    pub records: Vec<UtilizationRecord>,
    pub losses: Vec<LossRow>,
    pub skipped_steps: Vec<usize>,
    pub report: Report,
}

/// Dense base model described by the `model` section: randomly initialized,
/// then pretrained on the task mixture for `model.pretrain_steps` steps.
pub fn dense_from_config(cfg: &LabConfig) -> Result<BlockStack> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.model.dense_seed, purpose::DENSE_INIT, 0));
    let dense = BlockStack::random_dense(cfg.model.dims(), &mut rng);
    pretrain_dense(dense, cfg)
}

/// Trains every parameter of a dense stack on the task mixture with its own
/// warmup-cosine schedule and data stream.
pub fn pretrain_dense(dense: BlockStack, cfg: &LabConfig) -> Result<BlockStack> {
    let steps = cfg.model.pretrain_steps;
    if steps == 0 {
        return Ok(dense);
    }
    if !dense.is_dense() {
        return Err(Error::Precondition(
            "pretraining expects a dense stack".into(),
        ));
    }
    let mut pre = cfg.clone();
    pre.train.lr = cfg.model.pretrain_lr;
    pre.train.total_steps = steps;
    pre.train.warmup_steps = steps / 10;
    pre.train.steps = None;
    let mut trainer = Trainer::new(dense, pre)?.with_stream_seed(derive_seed(
        cfg.train.seed,
        purpose::PRETRAIN,
        0,
    ));
    trainer.run(steps)?;
    Ok(trainer.stack)
}

/// Dense base converted under the `conversion` and `gate` sections.
pub fn moe_from_config(cfg: &LabConfig) -> Result<BlockStack> {
    convert_model(&dense_from_config(cfg)?, &cfg.conversion_config())
}

/// Trains `stack` for `cfg.train.steps_to_run()` steps. When `run_dir` is given,
/// writes the resolved config, loss and utilization CSVs, the report and the
/// final checkpoint there.
pub fn train(stack: BlockStack, cfg: &LabConfig, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(stack, cfg.clone())?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(cfg)?)?;
        trainer = trainer.with_dump_dir(dir.join(NAN_DUMP_DIR));
    }
    trainer.run(cfg.train.steps_to_run())?;
    if trainer.step % cfg.telemetry.log_interval != 0 {
        trainer.flush();
    }
    let report = trainer.report()?;
    if let Some(dir) = run_dir {
        write_csv(
            fs::File::create(dir.join(UTILIZATION_FILE))?,
            &trainer.records,
        )?;
        write_losses(fs::File::create(dir.join(LOSSES_FILE))?, &trainer.losses)?;
        fs::write(dir.join(REPORT_FILE), serde_json::to_vec_pretty(&report)?)?;
        let meta = CheckpointMeta {
            precision: cfg.precision,
            seed: cfg.train.seed,
            step: trainer.step as u64,
        };
        save_checkpoint(&dir.join(CHECKPOINT_DIR), &trainer.stack, &meta)?;
    }
    Ok(TrainOutcome {
        stack: trainer.stack,
        records: trainer.records,
        losses: trainer.losses,
        skipped_steps: trainer.skipped_steps,
        report,
    })
}

pub fn write_losses<W: Write>(w: W, rows: &[LossRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "{LOSSES_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step, r.task, r.total, r.mse, r.aux, r.lr, r.shared_weight_norm
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Block;

    fn tiny() -> LabConfig {
        let mut c = LabConfig::default();
        c.model.hidden_dim = 8;
        c.model.inner_dim = 16;
        c.model.layers = 3;
        c.gate.encoder_dim = 8;
        c.train.tokens_per_step = 16;
        c.train.warmup_steps = 5;
        c.train.total_steps = 40;
        c.telemetry.log_interval = 10;
        c
    }

    #[test]
    fn zero_steps_leave_model_and_series_empty() {
        let mut c = tiny();
        c.train.steps = Some(0);
        let m = moe_from_config(&c).unwrap();
        let out = train(m.clone(), &c, None).unwrap();
        assert_eq!(out.stack, m);
        assert!(out.records.is_empty() && out.losses.is_empty());
    }

    #[test]
    fn loss_decomposes_and_routed_stay_frozen() {
        let c = tiny();
        let m = moe_from_config(&c).unwrap();
        let out = train(m.clone(), &c, None).unwrap();
        for r in &out.losses {
            assert_eq!(r.total, r.mse + r.aux);
            assert!(r.aux > 0.0);
        }
        for (a, b) in m.params().iter().zip(out.stack.params()) {
            if a.name.contains(".routed.") {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
        assert!(m
            .params()
            .iter()
            .zip(out.stack.params())
            .any(|(a, b)| a.value != b.value));
        assert_eq!(out.records.len(), 4 * 3);
        for r in &out.records {
            assert_eq!(r.counts.iter().sum::<u64>(), r.tokens * 2);
        }
    }

    #[test]
    fn first_update_is_nonzero() {
        let mut c = tiny();
        c.train.steps = Some(1);
        let m = moe_from_config(&c).unwrap();
        let out = train(m.clone(), &c, None).unwrap();
        assert!(out.losses[0].lr > 0.0);
        let gate_moved = match (&m.blocks[0], &out.stack.blocks[0]) {
            (Block::Moe(a), Block::Moe(b)) => a.gate != b.gate,
            _ => false,
        };
        assert!(gate_moved);
    }
}

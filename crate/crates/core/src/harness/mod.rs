//! Synthetic tasks, optimizer, training loop and run configuration.

pub mod config;
pub mod optim;
pub mod tasks;
pub mod train;

pub use config::{LabConfig, ModelConfig, TaskOrder, TrainConfig, LOG_DIR_ENV};
pub use optim::{adamw_step, lr_schedule, AdamWConfig, OptimizerState, ParamUpdate, Schedule};
pub use tasks::{derive_seed, gen_task_batch, TaskBatch, TaskParams, TaskSpec, N_TASKS};
pub use train::{
    dense_from_config, moe_from_config, pretrain_dense, train, LossRow, TrainOutcome, Trainer,
};

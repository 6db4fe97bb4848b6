//! Synthetic multi-task data: nine Gaussian-mixture token sources, each with
//! its own instruction embedding and frozen teacher network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockStack, ModelDims};
use crate::numkernel::{normal_matrix, Matrix};

pub const N_TASKS: usize = 9;

/// Mixes `(base, purpose, index)` into an independent seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, purpose: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Seed purposes, so independent random streams never share state.
pub(crate) mod purpose {
    pub const TASK: u64 = 1;
    pub const DATA: u64 = 2;
    pub const SCHEDULE: u64 = 3;
    pub const DENSE_INIT: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const PRETRAIN: u64 = 6;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskParams {
    /// Mixture components per task.
    pub components: usize,
    /// Standard deviation of component means around the origin.
    pub mean_scale: f64,
    /// Shared isotropic standard deviation within a component.
    pub component_std: f64,
    /// Rows of the instruction embedding sequence.
    pub instruction_len: usize,
    /// Residual FFN blocks in each teacher.
    pub teacher_layers: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            components: 4,
            mean_scale: 1.0,
            component_std: 0.5,
            instruction_len: 8,
            teacher_layers: 2,
        }
    }
}

/// One synthetic task, fully determined by `(task_id, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub means: Matrix,
    pub component_std: f64,
    pub instruction: Matrix,
    pub teacher: BlockStack,
}

impl TaskSpec {
    pub fn new(
        task_id: usize,
        seed: u64,
        hidden_dim: usize,
        inner_dim: usize,
        encoder_dim: usize,
        params: &TaskParams,
    ) -> Result<Self> {
        if !(1..=N_TASKS).contains(&task_id) {
            return Err(Error::Argument(format!(
                "task id {task_id} outside 1..={N_TASKS}"
            )));
        }
        if params.components == 0 || params.instruction_len == 0 {
            return Err(Error::Config(
                "tasks need components and an instruction".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose::TASK, task_id as u64));
        let means = normal_matrix(params.components, hidden_dim, params.mean_scale, &mut rng);
        let instruction = normal_matrix(params.instruction_len, encoder_dim, 1.0, &mut rng);
        let teacher = BlockStack::random_dense(
            ModelDims {
                hidden_dim,
                inner_dim,
                layers: params.teacher_layers,
            },
            &mut rng,
        );
        Ok(Self {
            task_id,
            means,
            component_std: params.component_std,
            instruction,
            teacher,
        })
    }

    /// All nine tasks.
    pub fn all(
        seed: u64,
        hidden_dim: usize,
        inner_dim: usize,
        encoder_dim: usize,
        params: &TaskParams,
    ) -> Result<Vec<Self>> {
        (1..=N_TASKS)
            .map(|t| Self::new(t, seed, hidden_dim, inner_dim, encoder_dim, params))
            .collect()
    }

    pub fn hidden_dim(&self) -> usize {
        self.means.cols()
    }

    /// Mean of the (equally weighted) mixture.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let k = self.means.rows() as f64;
        (0..self.means.cols())
            .map(|j| {
                (0..self.means.rows())
                    .map(|i| self.means.get(i, j))
                    .sum::<f64>()
                    / k
            })
            .collect()
    }
}

/// A sampled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub tokens: Matrix,
    pub targets: Matrix,
    pub instruction: Matrix,
}

/// Samples `n_tokens` tokens from the task mixture and labels them with the
/// task's teacher.
pub fn gen_task_batch(task: &TaskSpec, n_tokens: usize, seed: u64) -> Result<TaskBatch> {
    if n_tokens == 0 {
        return Err(Error::Argument("batch needs at least one token".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, task.component_std)
        .map_err(|e| Error::Config(format!("component std: {e}")))?;
    let c = task.means.rows();
    let mut tokens = Matrix::zeros(n_tokens, task.hidden_dim());
    for t in 0..n_tokens {
        let comp = rng.random_range(0..c);
        for (dst, &m) in tokens.row_mut(t).iter_mut().zip(task.means.row(comp)) {
            *dst = m + noise.sample(&mut rng);
        }
    }
    let targets = task.teacher.forward(&tokens, None)?;
    Ok(TaskBatch {
        tokens,
        targets,
        instruction: task.instruction.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(id: usize) -> TaskSpec {
        TaskSpec::new(id, 7, 8, 16, 8, &TaskParams::default()).unwrap()
    }

    #[test]
    fn tasks_are_deterministic_and_distinct() {
        assert_eq!(task(3), task(3));
        assert_ne!(task(3).means, task(4).means);
        assert!(TaskSpec::new(0, 7, 8, 16, 8, &TaskParams::default()).is_err());
        assert!(TaskSpec::new(10, 7, 8, 16, 8, &TaskParams::default()).is_err());
    }

    #[test]
    fn batches_are_deterministic() {
        let t = task(1);
        assert_eq!(
            gen_task_batch(&t, 5, 11).unwrap(),
            gen_task_batch(&t, 5, 11).unwrap()
        );
        assert_ne!(
            gen_task_batch(&t, 5, 11).unwrap(),
            gen_task_batch(&t, 5, 12).unwrap()
        );
    }

    #[test]
    fn targets_are_teacher_outputs() {
        let t = task(2);
        let b = gen_task_batch(&t, 6, 1).unwrap();
        assert_eq!(b.targets, t.teacher.forward(&b.tokens, None).unwrap());
    }

    #[test]
    fn sample_mean_matches_mixture_mean() {
        let t = task(5);
        let n = 20_000;
        let b = gen_task_batch(&t, n, 3).unwrap();
        let mean = t.mixture_mean();
        // per-coordinate variance: within-component noise plus spread of means
        for j in 0..t.hidden_dim() {
            let col: f64 = (0..n).map(|i| b.tokens.get(i, j)).sum::<f64>() / n as f64;
            let spread = (0..t.means.rows())
                .map(|i| (t.means.get(i, j) - mean[j]).powi(2))
                .sum::<f64>()
                / t.means.rows() as f64;
            let sigma = (t.component_std.powi(2) + spread).sqrt();
            assert!(
                (col - mean[j]).abs() < 3.0 * sigma / (n as f64).sqrt() + 1e-12,
                "coord {j}"
            );
        }
    }

    #[test]
    fn derived_seeds_differ_by_purpose_and_index() {
        let a = derive_seed(1, purpose::DATA, 0);
        assert_ne!(a, derive_seed(1, purpose::DATA, 1));
        assert_ne!(a, derive_seed(1, purpose::TASK, 0));
        assert_ne!(a, derive_seed(2, purpose::DATA, 0));
    }
}

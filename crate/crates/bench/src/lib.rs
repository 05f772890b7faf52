//! Shared fixtures for the benchmarks.

use edgeformer::train::{Example, Task, TaskKind, TaskSpec};
use edgeformer::{Model, ModelConfig, PlanSpec, Tensor};

/// Deterministic pseudo-random matrix with entries in [-1, 1).
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::from_f64(&[rows, cols], &data).expect("shape matches data")
}

pub fn mini_model(seed: u64) -> Model<f32> {
    Model::build(&ModelConfig::mini(), &PlanSpec::edgeformer(), seed).expect("mini model builds")
}

/// Copy-task examples sized for the mini model.
pub fn copy_batch(n: usize, max_len: usize) -> Vec<Example> {
    let c = ModelConfig::mini();
    Task::new(
        TaskSpec::new(TaskKind::Copy, max_len, max_len),
        c.vocab_size,
        c.max_len,
        0,
    )
    .expect("task fits the model")
    .examples(0, n)
}

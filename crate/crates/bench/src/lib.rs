//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stft_core::data::{generate, DataSpec};
use stft_core::{Dataset, ModelConfig, Tensor};

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Desk configuration with a small synthetic dataset (`per_class` training
/// samples per class).
pub fn desk(per_class: usize) -> (ModelConfig, Dataset) {
    let cfg = ModelConfig::desk();
    let mut spec = DataSpec::for_model(&cfg);
    spec.train_per_class = per_class;
    spec.test_per_class = per_class / 2;
    let data = generate(&spec).expect("synthetic data");
    (cfg, data)
}

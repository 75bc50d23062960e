//! Shared fixtures for the benchmarks.

use mia_core::data::gen_synthetic;
use mia_core::{Dataset, SyntheticConfig, TrainConfig};

/// Small Gaussian mixture used by every benchmark.
pub fn mixture(num_classes: usize, per_class: usize, seed: u64) -> Dataset {
    gen_synthetic(&SyntheticConfig {
        num_classes,
        dim: 16,
        per_class_count: per_class,
        class_separation: 3.0,
        within_class_sigma: 1.0,
        seed,
    })
    .expect("valid mixture")
}

/// One-hidden-layer MLP trained for a few epochs.
pub fn quick_train() -> TrainConfig {
    TrainConfig {
        hidden_sizes: vec![32],
        epochs: 5,
        ..TrainConfig::default()
    }
}

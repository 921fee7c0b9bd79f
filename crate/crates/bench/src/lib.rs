//! Shared fixtures for the criterion benches.

use xct_core::phantom::{sample_paired_dataset, ClassMix};
use xct_core::training::TrainConfig;
use xct_core::{PairedDataset, Real, Tensor};

/// Deterministic values in [-1, 1]; benches only need non-degenerate data.
pub fn filled<E: Real>(shape: &[usize]) -> Tensor<E> {
    Tensor::from_fn(shape, |i| E::lit(((i as f64) * 0.618_034).sin()))
}

pub fn paired(n: usize, side: usize) -> PairedDataset {
    sample_paired_dataset(n, side, &ClassMix::uniform(), 11).expect("phantoms")
}

/// Default hyperparameters sized for `side`.
pub fn config(side: usize) -> TrainConfig {
    TrainConfig::with_side(side)
}

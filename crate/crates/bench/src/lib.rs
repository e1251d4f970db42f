//! Deterministic fixtures shared by the benchmarks.

use ndssm_core::conv::FeatureMap;
use ndssm_core::model::{IsotropicModel, ModelConfig};
use ndssm_core::ndkernel::{FactoredInit, FactoredKernelSpec};
use ndssm_core::{Cutoff, Discretization, InitKind, Tensor};

/// Smooth pseudo-random signal of the given shape.
pub fn signal(shape: &[usize], seed: u64) -> Tensor {
    let phase = seed as f64 * 0.7;
    Tensor::from_fn(shape, |idx| {
        idx.iter().enumerate().map(|(d, &i)| ((i as f64 + 1.0) * (0.37 + 0.11 * d as f64) + phase).sin()).sum()
    })
}

/// Bidirectional square factored kernel with `side` samples per axis.
pub fn kernel_spec(dims: usize, side: usize, state_dim: usize) -> FactoredKernelSpec {
    let lengths = vec![side; dims];
    let deltas = vec![1.0 / side as f64; dims];
    let init = FactoredInit {
        kind: InitKind::Fourier,
        state_dim,
        rank: 1,
        lengths: &lengths,
        deltas: &deltas,
        method: Discretization::Trapezoid,
        bidirectional: true,
    };
    FactoredKernelSpec::initialize(&init, 0).expect("valid kernel fixture")
}

/// Classifier used by the training-step benchmark.
pub fn model(resolution: usize, width: usize, depth: usize) -> IsotropicModel {
    let cfg = ModelConfig { width, depth, state_dim: 64, ..ModelConfig::default() };
    IsotropicModel::new(cfg, &[resolution, resolution], Cutoff::new(0.5).expect("positive"), 0)
        .expect("valid model fixture")
}

/// Single-channel images with balanced labels.
pub fn batch(n: usize, resolution: usize, classes: usize) -> (Vec<FeatureMap>, Vec<usize>) {
    let images = (0..n)
        .map(|k| FeatureMap::new(signal(&[1, resolution, resolution], k as u64)).expect("image fixture"))
        .collect();
    (images, (0..n).map(|k| k % classes).collect())
}

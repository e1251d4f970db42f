//! Isotropic classifier built from depthwise S4ND (or local convolution)
//! blocks, with an analytic backward pass, AdamW, and the training loop.

mod network;
mod optim;
mod params;
mod train;

pub use network::{
    grid_for, score, AxisBasis, Conv2dBaselineModel, Gradients, IsotropicModel, LayerKind, ModelConfig, Tape,
};
pub use optim::{AdamW, LrSchedule};
pub use params::{ParamSet, Segment};
#[allow(unused_imports)]
pub use train::*;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

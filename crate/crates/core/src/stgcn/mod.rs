//! Spatio-temporal graph convolutional behavior classifier.

mod engine;
mod gradcheck;
mod optim;
mod params;
mod train;

use ndarray::Array3;

pub use engine::{
    backward_batch, cross_entropy, forward_batch, spatial_conv, temporal_conv, temporal_mix, BatchForward, Mode,
    NormStats, Prepared, Trace, PROB_FLOOR,
};
pub use gradcheck::{grad_check, grad_check_with, reference_scenario, GradCheckOptions, GradCheckReport, TensorCheck};
pub use optim::{Adam, OptimizerState};
pub use params::{
    Gradients, LayerWeights, ModelConfig, ModelParams, NetWeights, NormAffine, NormMode, RunningStats,
    MODEL_SCHEMA_VERSION,
};
pub use train::{evaluate, train, EpochRecord, History, TrainConfig};

use crate::error::Result;
use crate::graph::{AdjacencyTensor, EGO};
use crate::par;
use crate::scenario::Scenario;

/// Class probabilities of one scenario.
pub fn forward(s: &Scenario, params: &ModelParams, mode: Mode) -> Result<Vec<f64>> {
    let prep = Prepared::new(s, &params.config)?;
    let fwd = forward_batch(params, &[&prep], mode)?;
    Ok(fwd.traces[0].probs.to_vec())
}

/// Eval-mode probabilities for many scenarios.
pub fn predict(params: &ModelParams, scenarios: &[Scenario]) -> Result<Vec<Vec<f64>>> {
    let preps: Vec<Prepared> =
        par::map(scenarios, |s| Prepared::new(s, &params.config)).into_iter().collect::<Result<_>>()?;
    let refs: Vec<&Prepared> = preps.iter().collect();
    Ok(forward_batch(params, &refs, Mode::Eval)?.probs())
}

/// Cross-entropy of `probs` against a label name.
pub fn loss(probs: &[f64], label: &str, config: &ModelConfig) -> Result<f64> {
    cross_entropy(probs, config.class_index(label)?)
}

/// Loss and gradients of one scenario, using its own statistics for normalization.
pub fn backward(s: &Scenario, params: &ModelParams, label: &str) -> Result<(f64, Gradients)> {
    let y = params.config.class_index(label)?;
    let prep = Prepared::new(s, &params.config)?;
    let fwd = forward_batch(params, &[&prep], Mode::Train)?;
    backward_batch(params, &[&prep], &fwd, &[y])
}

/// Folds the batch statistics of a train-mode pass into the running averages.
pub fn update_running_stats(params: &mut ModelParams, fwd: &BatchForward) {
    if params.config.norm != NormMode::Batch || fwd.mode != Mode::Train {
        return;
    }
    let m = params.config.norm_momentum;
    for (running, used) in params.running.iter_mut().zip(&fwd.stats) {
        for (r, s) in running.iter_mut().zip(used) {
            r.mean = &r.mean * (1.0 - m) + &s.mean * m;
            r.var = &r.var * (1.0 - m) + &s.unbiased_var * m;
        }
    }
}

/// Eval-mode adjacency of the first layer, as built during inference.
pub fn first_layer_adjacency(s: &Scenario, params: &ModelParams) -> Result<AdjacencyTensor> {
    let prep = Prepared::new(s, &params.config)?;
    let fwd = forward_batch(params, &[&prep], Mode::Eval)?;
    let frames = &fwd.traces[0].layers[0].frames;
    let n = prep.num_nodes();
    let mut g = Array3::zeros((prep.gamma(), n, n));
    for (t, f) in frames.iter().enumerate() {
        g.index_axis_mut(ndarray::Axis(0), t).assign(&f.g);
    }
    debug_assert_eq!(EGO, 0);
    Ok(AdjacencyTensor { g, valid: prep.nodes.present.clone(), agent_ids: prep.nodes.agent_ids.clone() })
}

#[cfg(test)]
mod tests;

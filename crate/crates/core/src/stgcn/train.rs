use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::engine::{backward_batch, cross_entropy, forward_batch, Mode, Prepared};
use super::optim::{Adam, OptimizerState};
use super::params::{ModelParams, NormMode};
use super::update_running_stats;
use crate::error::{Error, Result};
use crate::par;
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: Adam,
    pub epochs: usize,
    pub batch_size: usize,
    /// Shuffling seed.
    pub seed: u64,
    /// Stop once eval-mode training accuracy reaches this value.
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { optimizer: Adam::default(), epochs: 50, batch_size: 16, seed: 0, target_train_accuracy: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_accuracy)
    }

    /// Hash of the exact bit patterns of every recorded value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.epochs {
            h.update((e.epoch as u64).to_le_bytes());
            h.update(e.loss.to_bits().to_le_bytes());
            h.update(e.train_accuracy.to_bits().to_le_bytes());
            for v in [e.val_loss, e.val_accuracy].into_iter().flatten() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

/// Eval-mode `(mean loss, accuracy)` over prepared scenarios.
pub fn evaluate(params: &ModelParams, preps: &[Prepared], labels: &[usize]) -> Result<(f64, f64)> {
    let refs: Vec<&Prepared> = preps.iter().collect();
    let fwd = forward_batch(params, &refs, Mode::Eval)?;
    let mut loss = 0.0;
    let mut hits = 0;
    for (t, &y) in fwd.traces.iter().zip(labels) {
        let p = t.probs.as_slice().expect("contiguous");
        loss += cross_entropy(p, y)?;
        hits += (argmax(p) == y) as usize;
    }
    let n = labels.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

fn prepare(params: &ModelParams, scenarios: &[Scenario]) -> Result<(Vec<Prepared>, Vec<usize>)> {
    let preps: Vec<Prepared> =
        par::map(scenarios, |s| Prepared::new(s, &params.config)).into_iter().collect::<Result<_>>()?;
    let labels: Vec<usize> = scenarios.iter().map(|s| params.config.class_index(&s.label)).collect::<Result<_>>()?;
    Ok((preps, labels))
}

fn batches(order: &[usize], size: usize, min: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(what) => Error::Training(format!("diverged in epoch {epoch}: {what}")),
        other => other,
    }
}

/// Mini-batch Adam on the mean cross-entropy. Updates `params` in place;
/// `validation` may be empty.
pub fn train(params: &mut ModelParams, scenarios: &[Scenario], validation: &[Scenario], cfg: &TrainConfig) -> Result<History> {
    if scenarios.is_empty() {
        return Err(Error::Config("no training scenarios".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let batch_norm = params.config.norm == NormMode::Batch;
    if batch_norm && (cfg.batch_size < 2 || scenarios.len() < 2) {
        return Err(Error::Config("batch normalization needs at least two scenarios per batch".into()));
    }
    let (preps, labels) = prepare(params, scenarios)?;
    let (val_preps, val_labels) = prepare(params, validation)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(params);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..scenarios.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in batches(&order, cfg.batch_size, if batch_norm { 2 } else { 1 }) {
            let refs: Vec<&Prepared> = batch.iter().map(|&i| &preps[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let fwd = forward_batch(params, &refs, Mode::Train).map_err(|e| diverged(epoch, e))?;
            let (loss, grads) = backward_batch(params, &refs, &fwd, &ys).map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss became {loss} in epoch {epoch}")));
            }
            total += loss * batch.len() as f64;
            cfg.optimizer.step(params, &grads, &mut state).map_err(|e| diverged(epoch, e))?;
            update_running_stats(params, &fwd);
        }
        let (_, acc) = evaluate(params, &preps, &labels).map_err(|e| diverged(epoch, e))?;
        let val = if val_preps.is_empty() {
            None
        } else {
            Some(evaluate(params, &val_preps, &val_labels).map_err(|e| diverged(epoch, e))?)
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: total / scenarios.len() as f64,
            train_accuracy: acc,
            val_loss: val.map(|v| v.0),
            val_accuracy: val.map(|v| v.1),
        });
        if cfg.target_train_accuracy.is_some_and(|target| acc >= target) {
            break;
        }
    }
    Ok(history)
}

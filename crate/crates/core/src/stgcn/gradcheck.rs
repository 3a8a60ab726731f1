use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::engine::{backward_batch, cross_entropy, forward_batch, Mode, Prepared, PROB_FLOOR};
use super::params::{Gradients, ModelParams};
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, Point3};
use crate::par;
use crate::scenario::{Agent, AgentClass, AgentFrameState, Scenario, Tracklet, LABEL_GO, LABEL_STOP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    pub tol: f64,
    /// Coordinates whose activation pattern changes within this many steps are skipped.
    pub kink_radius: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, tol: 1e-4, kink_radius: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_error: f64,
    pub max_error_tensor: Option<String>,
    pub checked_coords: usize,
    pub skipped_kink_coords: usize,
    pub h: f64,
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn failing_tensors(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| !t.passed).map(|t| t.name.as_str()).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

struct Probe {
    loss: f64,
    pattern: Vec<bool>,
}

fn probe(params: &ModelParams, batch: &[&Prepared], labels: &[usize]) -> Result<Probe> {
    let fwd = forward_batch(params, batch, Mode::Train)?;
    let mut loss = 0.0;
    let mut pattern = Vec::new();
    for ((trace, prep), &y) in fwd.traces.iter().zip(batch).zip(labels) {
        let p = trace.probs.as_slice().expect("contiguous");
        loss += cross_entropy(p, y)?;
        pattern.push(p[y] >= PROB_FLOOR);
        pattern.extend(trace.activation_pattern(prep));
    }
    Ok(Probe { loss: loss / batch.len() as f64, pattern })
}

/// Compares `analytic` against central differences of the train-mode batch loss.
pub fn grad_check_with(
    params: &ModelParams,
    scenarios: &[Scenario],
    analytic: &Gradients,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let preps: Vec<Prepared> = scenarios.iter().map(|s| Prepared::new(s, &params.config)).collect::<Result<_>>()?;
    let labels: Vec<usize> = scenarios.iter().map(|s| params.config.class_index(&s.label)).collect::<Result<_>>()?;
    let batch: Vec<&Prepared> = preps.iter().collect();
    let base = probe(params, &batch, &labels)?;

    let mut coords = Vec::new();
    let grads = analytic.tensors();
    for (ti, (_, g)) in grads.iter().enumerate() {
        for ci in 0..g.len() {
            coords.push((ti, ci));
        }
    }
    let flat: Vec<Vec<f64>> = grads.iter().map(|(_, g)| g.iter().copied().collect()).collect();

    let results = par::map(&coords, |&(ti, ci)| -> Result<Option<f64>> {
        let shifted = |delta: f64| -> Result<Probe> {
            let mut p = params.clone();
            let mut tensors = p.tensors_mut();
            let view = &mut tensors[ti].1;
            *view.iter_mut().nth(ci).expect("coordinate in range") += delta;
            drop(tensors);
            probe(&p, &batch, &labels)
        };
        let (plus, minus) = (shifted(opts.h)?, shifted(-opts.h)?);
        let far = opts.kink_radius * opts.h;
        let (far_plus, far_minus) = (shifted(far)?, shifted(-far)?);
        if [&plus, &minus, &far_plus, &far_minus].iter().any(|p| p.pattern != base.pattern) {
            return Ok(None);
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * opts.h);
        Ok(Some(relative_error(flat[ti][ci], numeric)))
    });

    let mut tensors: Vec<TensorCheck> = grads
        .iter()
        .map(|(name, _)| TensorCheck { name: name.clone(), checked: 0, skipped: 0, max_error: 0.0, passed: true })
        .collect();
    for (&(ti, _), r) in coords.iter().zip(results) {
        let t = &mut tensors[ti];
        match r? {
            None => t.skipped += 1,
            Some(err) => {
                t.checked += 1;
                t.max_error = t.max_error.max(err);
            }
        }
    }
    for t in &mut tensors {
        t.passed = t.max_error < opts.tol;
    }
    let worst = tensors.iter().filter(|t| t.checked > 0).max_by(|a, b| a.max_error.total_cmp(&b.max_error));
    Ok(GradCheckReport {
        passed: tensors.iter().all(|t| t.passed),
        max_error: worst.map_or(0.0, |t| t.max_error),
        max_error_tensor: worst.map(|t| t.name.clone()),
        checked_coords: tensors.iter().map(|t| t.checked).sum(),
        skipped_kink_coords: tensors.iter().map(|t| t.skipped).sum(),
        h: opts.h,
        tol: opts.tol,
        tensors,
    })
}

/// Checks the model's own reverse-mode gradients on a batch.
pub fn grad_check(params: &ModelParams, scenarios: &[Scenario], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let preps: Vec<Prepared> = scenarios.iter().map(|s| Prepared::new(s, &params.config)).collect::<Result<_>>()?;
    let labels: Vec<usize> = scenarios.iter().map(|s| params.config.class_index(&s.label)).collect::<Result<_>>()?;
    let batch: Vec<&Prepared> = preps.iter().collect();
    let fwd = forward_batch(params, &batch, Mode::Train)?;
    let (_, analytic) = backward_batch(params, &batch, &fwd, &labels)?;
    grad_check_with(params, scenarios, &analytic, opts)
}

/// Small random scenario with every agent within a few meters of the camera,
/// so the distance gate leaves most edges open. One agent is vulnerable and one
/// tracklet has a gap.
pub fn reference_scenario(seed: u64, gamma: usize, agents: usize, feature_dim: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feature = |rng: &mut ChaCha8Rng| (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let ego_feature = feature(&mut rng);
    let context = (0..gamma).map(|_| feature(&mut rng).into_iter().map(|v| 0.1 * v).collect()).collect();
    let agents = (0..agents)
        .map(|k| {
            let mut presence = vec![true; gamma];
            if k == 1 && gamma > 2 {
                presence[gamma - 1] = false;
            }
            let start = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3), rng.random_range(0.5..1.5));
            let velocity = [rng.random_range(-0.2..0.2), 0.0, rng.random_range(-0.2..0.2)];
            let states = (0..gamma)
                .filter(|&t| presence[t])
                .map(|t| AgentFrameState {
                    t,
                    position: Point3::new(
                        start.x + velocity[0] * t as f64,
                        start.y,
                        start.z + velocity[2] * t as f64,
                    ),
                    appearance: feature(&mut rng),
                    observation: None,
                })
                .collect();
            let class = if k == 0 { AgentClass::Person } else { AgentClass::Car };
            Agent { tracklet: Tracklet { agent_id: 10 + k as u64, class, presence }, states }
        })
        .collect();
    Scenario {
        gamma,
        fps: 3.0,
        intrinsics: CameraIntrinsics::default(),
        ego_feature,
        context,
        agents,
        label: if seed.is_multiple_of(2) { LABEL_STOP } else { LABEL_GO }.into(),
        ground_truth_risk: None,
        ground_truth_group: None,
    }
}

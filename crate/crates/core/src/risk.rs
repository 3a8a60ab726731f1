//! Two-stage risk inference: predict Stop/Go, then score each agent by the Go
//! probability of the scene with that agent removed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ego_interaction_profile;
use crate::par;
use crate::scenario::{load_scenario, mask_agent, mask_group, AgentId, Scenario, LABEL_GO, LABEL_STOP};
use crate::stgcn::{first_layer_adjacency, forward, Mode, ModelParams};

pub const DEFAULT_DELTA: f64 = 0.5;
pub const DEFAULT_ETA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    pub go: f64,
    pub stop: f64,
}

fn class_slots(model: &ModelParams) -> Result<(usize, usize)> {
    let names = &model.config.class_names;
    if names.len() != 2 || names[0] != LABEL_GO || names[1] != LABEL_STOP {
        return Err(Error::Config(format!("risk inference needs classes [Go, Stop], model has {names:?}")));
    }
    Ok((0, 1))
}

/// Eval-mode Go/Stop probabilities.
pub fn predict_behavior(s: &Scenario, model: &ModelParams) -> Result<Behavior> {
    let (go, stop) = class_slots(model)?;
    let p = forward(s, model, Mode::Eval)?;
    Ok(Behavior { go: p[go], stop: p[stop] })
}

fn go_probability(s: &Scenario, model: &ModelParams) -> Result<f64> {
    predict_behavior(s, model).map(|b| b.go)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub members: Vec<AgentId>,
    pub score: f64,
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub stop_prob: f64,
    pub delta: f64,
    /// Go probability with each agent removed; absent when gated out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<AgentId, f64>>,
    /// Agent ids by descending score, ties by ascending id.
    pub ranking: Vec<AgentId>,
    pub predicted_risk: Option<AgentId>,
    pub group: Option<GroupResult>,
    pub model_digest: String,
    pub scenario_path: Option<PathBuf>,
    /// Set when the Stop gate passed but there was no agent to remove.
    pub no_agents_warning: bool,
}

impl RiskReport {
    pub fn gated_in(&self) -> bool {
        self.stop_prob >= self.delta
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// Orders `(id, score)` pairs by descending score, then ascending id.
pub fn rank(scores: &BTreeMap<AgentId, f64>) -> Vec<AgentId> {
    let mut pairs: Vec<(AgentId, f64)> = scores.iter().map(|(&k, &v)| (k, v)).collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs.into_iter().map(|(id, _)| id).collect()
}

pub fn risk_scores(s: &Scenario, model: &ModelParams, delta: f64) -> Result<RiskReport> {
    check_delta(delta)?;
    let stop_prob = predict_behavior(s, model)?.stop;
    let mut report = RiskReport {
        stop_prob,
        delta,
        scores: None,
        ranking: Vec::new(),
        predicted_risk: None,
        group: None,
        model_digest: model.digest(),
        scenario_path: None,
        no_agents_warning: false,
    };
    if stop_prob < delta {
        return Ok(report);
    }
    report.no_agents_warning = s.agents.is_empty();
    let ids = s.agent_ids();
    let scored = par::map(&ids, |&id| mask_agent(s, id).and_then(|m| go_probability(&m, model)).map(|p| (id, p)));
    let scores: BTreeMap<AgentId, f64> = scored.into_iter().collect::<Result<_>>()?;
    report.ranking = rank(&scores);
    report.scores = Some(scores);
    report.predicted_risk = report.ranking.first().copied();
    Ok(report)
}

/// Go probability with every agent in `group` removed at once.
pub fn group_risk_score(s: &Scenario, model: &ModelParams, group: &[AgentId]) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::Config("risk group must not be empty".into()));
    }
    go_probability(&mask_group(s, group)?, model)
}

/// Agents whose mean first-layer ego interaction strictly exceeds `eta`.
pub fn identify_risk_group(s: &Scenario, model: &ModelParams, eta: f64) -> Result<Vec<AgentId>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
    }
    let adj = first_layer_adjacency(s, model)?;
    let mut out: Vec<AgentId> = ego_interaction_profile(&adj).into_iter().filter(|&(_, v)| v > eta).map(|(id, _)| id).collect();
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CauseRecall {
    pub total: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallResult {
    pub total: usize,
    pub correct: usize,
    pub gated_out: usize,
    pub recall: f64,
    /// Keyed by cause: the class name of the risk agent, or "group".
    pub per_cause: BTreeMap<String, CauseRecall>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallOptions {
    pub delta: f64,
    pub eta: f64,
}

impl Default for RecallOptions {
    fn default() -> Self {
        RecallOptions { delta: DEFAULT_DELTA, eta: DEFAULT_ETA }
    }
}

struct Outcome {
    cause: String,
    gated: bool,
    correct: bool,
}

fn judge(s: &Scenario, model: &ModelParams, opts: &RecallOptions) -> Result<Outcome> {
    if let Some(truth) = &s.ground_truth_group {
        let stop = predict_behavior(s, model)?.stop;
        let gated = stop >= opts.delta;
        let mut truth = truth.clone();
        truth.sort_unstable();
        let correct = gated && identify_risk_group(s, model, opts.eta)? == truth;
        return Ok(Outcome { cause: "group".into(), gated, correct });
    }
    let truth = s.ground_truth_risk.expect("checked by caller");
    let cause = s.agent(truth).map_or("unknown", |a| a.tracklet.class.name()).to_string();
    let report = risk_scores(s, model, opts.delta)?;
    Ok(Outcome { cause, gated: report.gated_in(), correct: report.predicted_risk == Some(truth) })
}

/// Recall over scenarios carrying ground truth; gated-out scenarios count as misses.
pub fn evaluate_recall(scenarios: &[(PathBuf, Scenario)], model: &ModelParams, opts: &RecallOptions) -> Result<RecallResult> {
    check_delta(opts.delta)?;
    for (path, s) in scenarios {
        if s.ground_truth_risk.is_none() && s.ground_truth_group.is_none() {
            return Err(Error::Evaluation { path: path.clone(), message: "no ground-truth risk annotation".into() });
        }
    }
    let outcomes = par::map(scenarios, |(_, s)| judge(s, model, opts));
    let mut result = RecallResult { total: 0, correct: 0, gated_out: 0, recall: 0.0, per_cause: BTreeMap::new() };
    for o in outcomes {
        let o = o?;
        result.total += 1;
        result.correct += o.correct as usize;
        result.gated_out += (!o.gated) as usize;
        let c = result.per_cause.entry(o.cause).or_default();
        c.total += 1;
        c.correct += o.correct as usize;
    }
    result.recall = if result.total == 0 { 0.0 } else { result.correct as f64 / result.total as f64 };
    Ok(result)
}

/// Loads `paths` and evaluates recall over them.
pub fn evaluate_recall_files(paths: &[impl AsRef<Path> + Sync], model: &ModelParams, opts: &RecallOptions) -> Result<RecallResult> {
    let loaded = par::map(paths, |p| load_scenario(p.as_ref()).map(|s| (p.as_ref().to_path_buf(), s)));
    let scenarios: Vec<(PathBuf, Scenario)> = loaded.into_iter().collect::<Result<_>>()?;
    evaluate_recall(&scenarios, model, opts)
}

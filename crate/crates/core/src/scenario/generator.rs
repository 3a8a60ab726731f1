//! Rule-labeled synthetic scenarios.
//!
//! Agents move with constant velocity in the ego camera frame. A clip is
//! labeled `Stop` iff some agent, while in front of the ego (z > 0), comes
//! closer to the origin than `d_stop` at a sampled frame; that agent is the
//! planted risk object. Background agents are kept at least `go_clearance`
//! away from the ego at every frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Agent, AgentClass, AgentFrameState, AgentId, Scenario, Tracklet, LABEL_GO, LABEL_STOP};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Point3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub gamma: usize,
    pub fps: f64,
    pub feature_dim: usize,
    pub intrinsics: CameraIntrinsics,
    pub min_agents: usize,
    pub max_agents: usize,
    /// Fraction of Stop scenarios (balance target).
    pub stop_fraction: f64,
    /// Fraction of Stop scenarios built as multi-pedestrian group crossings.
    pub group_fraction: f64,
    pub d_stop: f64,
    pub go_clearance: f64,
    pub vulnerable_fraction: f64,
    pub noise: f64,
    pub context_scale: f64,
    /// Seed of the class prototype vectors, shared by every scenario of a dataset.
    pub prototype_seed: u64,
    pub min_track_len: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            gamma: 20,
            fps: 3.0,
            feature_dim: 16,
            intrinsics: CameraIntrinsics::default(),
            min_agents: 1,
            max_agents: 5,
            stop_fraction: 0.5,
            group_fraction: 0.0,
            d_stop: 2.0,
            go_clearance: 3.5,
            vulnerable_fraction: 0.5,
            noise: 0.1,
            context_scale: 0.1,
            prototype_seed: 0,
            min_track_len: 4,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.gamma == 0 {
            return bad("gamma must be at least 1".into());
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1".into());
        }
        self.intrinsics.validate()?;
        if self.min_agents > self.max_agents {
            return bad(format!("min_agents {} exceeds max_agents {}", self.min_agents, self.max_agents));
        }
        for (name, v) in [
            ("stop_fraction", self.stop_fraction),
            ("group_fraction", self.group_fraction),
            ("vulnerable_fraction", self.vulnerable_fraction),
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.train_fraction + self.val_fraction > 1.0 + 1e-12 {
            return bad("train_fraction + val_fraction exceeds 1".into());
        }
        if !(self.d_stop > 0.6) {
            return bad(format!("d_stop must exceed 0.6 m, got {}", self.d_stop));
        }
        if !(self.go_clearance > self.d_stop) {
            return bad(format!("go_clearance {} must exceed d_stop {}", self.go_clearance, self.d_stop));
        }
        if !(self.noise >= 0.0 && self.context_scale >= 0.0) {
            return bad("noise scales must be non-negative".into());
        }
        if self.min_track_len == 0 {
            return bad("min_track_len must be at least 1".into());
        }
        if self.stop_fraction > 0.0 && self.max_agents == 0 {
            return Err(Error::Generation("Stop scenarios requested but max_agents is 0".into()));
        }
        if self.stop_fraction > 0.0 && self.group_fraction > 0.0 && self.max_agents < 2 {
            return Err(Error::Generation("group scenarios need max_agents >= 2".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("config serialization is infallible");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    Go,
    Stop,
    GroupStop,
}

/// Constant-velocity motion in the ego frame; y (height) stays at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kinematics {
    /// Lateral crossing at a fixed depth; `x = speed * (t - cross_frame) / fps`.
    Crossing { depth: f64, speed: f64, cross_frame: f64 },
    /// Motion along the optical axis at a fixed lateral offset.
    Longitudinal { lateral: f64, start_depth: f64, speed: f64 },
}

impl Kinematics {
    pub fn position(&self, t: usize, fps: f64) -> Point3 {
        let time = t as f64 / fps;
        match *self {
            Kinematics::Crossing { depth, speed, cross_frame } => {
                Point3::new(speed * (time - cross_frame / fps), 0.0, depth)
            }
            Kinematics::Longitudinal { lateral, start_depth, speed } => Point3::new(lateral, 0.0, start_depth + speed * time),
        }
    }

    pub fn trajectory(&self, gamma: usize, fps: f64) -> Vec<Point3> {
        (0..gamma).map(|t| self.position(t, fps)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleOutcome {
    pub stop: bool,
    pub risk: Option<AgentId>,
    /// Every agent satisfying the closest-approach rule, ascending id.
    pub triggering: Vec<AgentId>,
}

/// Re-derives the behavior label from stored positions.
pub fn apply_stop_rule(s: &Scenario, d_stop: f64) -> RuleOutcome {
    // (closest frame, id) for each agent whose closest approach ahead of the ego is below d_stop
    let mut hits: Vec<(usize, AgentId)> = Vec::new();
    for agent in &s.agents {
        let mut best: Option<(f64, usize)> = None;
        for st in agent.states.iter().filter(|st| st.position.z > 0.0) {
            let d = st.position.norm();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, st.t));
            }
        }
        if let Some((d, t)) = best {
            if d < d_stop {
                hits.push((t, agent.id()));
            }
        }
    }
    let risk = hits.iter().min().map(|&(_, id)| id);
    let mut triggering: Vec<AgentId> = hits.iter().map(|&(_, id)| id).collect();
    triggering.sort_unstable();
    RuleOutcome { stop: !hits.is_empty(), risk, triggering }
}

pub fn generate_scenario(cfg: &GeneratorConfig, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = if rng.random::<f64>() < cfg.stop_fraction {
        if rng.random::<f64>() < cfg.group_fraction {
            ScenarioKind::GroupStop
        } else {
            ScenarioKind::Stop
        }
    } else {
        ScenarioKind::Go
    };
    build(cfg, kind, &mut rng)
}

pub fn generate_scenario_of_kind(cfg: &GeneratorConfig, kind: ScenarioKind, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    match kind {
        ScenarioKind::Stop if cfg.max_agents == 0 => {
            return Err(Error::Generation("Stop label requested with zero agents".into()))
        }
        ScenarioKind::GroupStop if cfg.max_agents < 2 => {
            return Err(Error::Generation("group scenario requested with fewer than 2 agents".into()))
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep the stream aligned with generate_scenario's kind draws
    let _: (f64, f64) = (rng.random(), rng.random());
    build(cfg, kind, &mut rng)
}

fn prototypes(cfg: &GeneratorConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.prototype_seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    // one per class plus the ego descriptor last
    (0..=AgentClass::ALL.len()).map(|_| (0..cfg.feature_dim).map(|_| unit.sample(&mut rng)).collect()).collect()
}

fn class_speed(class: AgentClass, rng: &mut ChaCha8Rng) -> f64 {
    match class {
        AgentClass::Person => rng.random_range(0.8..1.6),
        AgentClass::Bicycle => rng.random_range(2.0..4.0),
        AgentClass::Motorcycle | AgentClass::Car => rng.random_range(3.0..6.0),
        AgentClass::Bus | AgentClass::Truck => rng.random_range(2.0..5.0),
    }
}

fn sample_class(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> AgentClass {
    let pool: &[AgentClass] = if rng.random::<f64>() < cfg.vulnerable_fraction {
        &AgentClass::ALL[..2]
    } else {
        &AgentClass::ALL[2..]
    };
    pool[rng.random_range(0..pool.len())]
}

struct Plan {
    class: AgentClass,
    trajectory: Vec<Point3>,
    presence: Vec<bool>,
}

/// Random contiguous window of at least `min_len` frames that contains `must`, if given.
fn window(gamma: usize, min_len: usize, must: Option<usize>, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let min_len = min_len.min(gamma);
    match must {
        Some(m) => {
            let start = rng.random_range(0..=m.min(gamma - min_len));
            let lo_end = (start + min_len - 1).max(m);
            let end = rng.random_range(lo_end..gamma);
            (start, end)
        }
        None => {
            let len = rng.random_range(min_len..=gamma);
            let start = rng.random_range(0..=gamma - len);
            (start, start + len - 1)
        }
    }
}

fn crossing_plan(
    cfg: &GeneratorConfig,
    class: AgentClass,
    depth: f64,
    cross_frame: f64,
    direction: f64,
    rng: &mut ChaCha8Rng,
) -> Plan {
    let speed = direction * class_speed(class, rng);
    let kin = Kinematics::Crossing { depth, speed, cross_frame };
    let trajectory = kin.trajectory(cfg.gamma, cfg.fps);
    let closest = (0..cfg.gamma)
        .min_by(|&a, &b| trajectory[a].norm().total_cmp(&trajectory[b].norm()))
        .unwrap_or(0);
    let (s, e) = window(cfg.gamma, cfg.min_track_len, Some(closest), rng);
    let presence = (0..cfg.gamma).map(|t| t >= s && t <= e).collect();
    Plan { class, trajectory, presence }
}

fn background_plan(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Plan {
    loop {
        let class = sample_class(cfg, rng);
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let kin = if rng.random::<bool>() {
            let speed = side * class_speed(class, rng);
            Kinematics::Crossing {
                depth: rng.random_range(cfg.go_clearance..cfg.go_clearance + 16.0),
                speed,
                cross_frame: rng.random_range(0.0..cfg.gamma as f64),
            }
        } else {
            let speed = if rng.random::<bool>() { 1.0 } else { -1.0 } * class_speed(class, rng);
            Kinematics::Longitudinal {
                lateral: side * rng.random_range(cfg.go_clearance..cfg.go_clearance + 8.0),
                start_depth: rng.random_range(3.0..30.0),
                speed,
            }
        };
        let trajectory = kin.trajectory(cfg.gamma, cfg.fps);
        let (s, e) = window(cfg.gamma, cfg.min_track_len, None, rng);
        let presence: Vec<bool> = (0..cfg.gamma).map(|t| t >= s && t <= e && trajectory[t].z > 0.5).collect();
        if presence.iter().any(|&p| p) {
            return Plan { class, trajectory, presence };
        }
    }
}

fn build(cfg: &GeneratorConfig, kind: ScenarioKind, rng: &mut ChaCha8Rng) -> Result<Scenario> {
    let protos = prototypes(cfg);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let ctx = Normal::new(0.0, cfg.context_scale).map_err(|e| Error::Config(e.to_string()))?;

    let needed = match kind {
        ScenarioKind::Go => 0,
        ScenarioKind::Stop => 1,
        ScenarioKind::GroupStop => 2,
    };
    let mut n_agents = rng.random_range(cfg.min_agents..=cfg.max_agents).max(needed);

    let mut plans = Vec::with_capacity(n_agents);
    let t_lo = 0.3 * cfg.gamma as f64;
    let t_hi = (0.7 * cfg.gamma as f64).max(t_lo + 1e-9);
    let max_depth = cfg.d_stop - 0.3;
    match kind {
        ScenarioKind::Go => {}
        ScenarioKind::Stop => {
            let class = sample_class(cfg, rng);
            let depth = rng.random_range(0.6..max_depth);
            let cross = rng.random_range(t_lo..t_hi);
            let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
            plans.push(crossing_plan(cfg, class, depth, cross, dir, rng));
        }
        ScenarioKind::GroupStop => {
            let size = rng.random_range(2..=3usize.min(cfg.max_agents));
            n_agents = n_agents.max(size);
            let cross = rng.random_range(t_lo..t_hi);
            let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for _ in 0..size {
                let depth = rng.random_range(0.6..max_depth);
                let jitter = rng.random_range(-0.5..0.5);
                plans.push(crossing_plan(cfg, AgentClass::Person, depth, cross + jitter, dir, rng));
            }
        }
    }
    while plans.len() < n_agents {
        plans.push(background_plan(cfg, rng));
    }

    // shuffle so the risk agent's slot and id carry no information
    for i in (1..plans.len()).rev() {
        let j = rng.random_range(0..=i);
        plans.swap(i, j);
    }
    let first_id: AgentId = rng.random_range(1..1000);

    let ego_feature: Vec<f64> =
        protos[AgentClass::ALL.len()].iter().map(|p| p + noise.sample(rng)).collect();
    let context: Vec<Vec<f64>> =
        (0..cfg.gamma).map(|_| (0..cfg.feature_dim).map(|_| ctx.sample(rng)).collect()).collect();

    let agents: Vec<Agent> = plans
        .into_iter()
        .enumerate()
        .map(|(i, plan)| {
            let proto = &protos[plan.class as usize];
            let states = (0..cfg.gamma)
                .filter(|&t| plan.presence[t])
                .map(|t| AgentFrameState {
                    t,
                    position: plan.trajectory[t],
                    appearance: proto.iter().map(|p| p + noise.sample(rng)).collect(),
                    observation: None,
                })
                .collect();
            Agent {
                tracklet: Tracklet { agent_id: first_id + i as AgentId, class: plan.class, presence: plan.presence },
                states,
            }
        })
        .collect();

    let mut scenario = Scenario {
        gamma: cfg.gamma,
        fps: cfg.fps,
        intrinsics: cfg.intrinsics,
        ego_feature,
        context,
        agents,
        label: LABEL_GO.into(),
        ground_truth_risk: None,
        ground_truth_group: None,
    };

    let outcome = apply_stop_rule(&scenario, cfg.d_stop);
    let consistent = match kind {
        ScenarioKind::Go => !outcome.stop,
        ScenarioKind::Stop => outcome.triggering.len() == 1,
        ScenarioKind::GroupStop => outcome.triggering.len() >= 2,
    };
    if !consistent {
        return Err(Error::Generation(format!(
            "planted {kind:?} scenario disagrees with the label rule ({} triggering agents)",
            outcome.triggering.len()
        )));
    }
    if outcome.stop {
        scenario.label = LABEL_STOP.into();
        scenario.ground_truth_risk = outcome.risk;
        if kind == ScenarioKind::GroupStop {
            scenario.ground_truth_group = Some(outcome.triggering);
        }
    }
    scenario.validate()?;
    Ok(scenario)
}

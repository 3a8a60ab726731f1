//! Egocentric traffic scenarios at feature level: tracked road agents with
//! per-frame 3D positions and appearance vectors, per-frame scene context,
//! and the clip-level behavior label.

mod dataset;
mod generator;
mod io;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use dataset::{generate_dataset, DatasetManifest, Split, MANIFEST_FILE};
pub use generator::{
    apply_stop_rule, generate_scenario, generate_scenario_of_kind, GeneratorConfig, Kinematics, RuleOutcome,
    ScenarioKind,
};
pub use io::{load_scenario, save_scenario, scenario_from_json, scenario_to_json, SCENARIO_SCHEMA_VERSION};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PixelObservation, Point3};

pub const LABEL_GO: &str = "Go";
pub const LABEL_STOP: &str = "Stop";

pub type AgentId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentClass {
    Person,
    Bicycle,
    Car,
    Motorcycle,
    Bus,
    Truck,
}

impl AgentClass {
    pub const ALL: [AgentClass; 6] = [
        AgentClass::Person,
        AgentClass::Bicycle,
        AgentClass::Car,
        AgentClass::Motorcycle,
        AgentClass::Bus,
        AgentClass::Truck,
    ];

    /// Persons and cyclists have little or no external protection.
    pub fn is_vulnerable(self) -> bool {
        matches!(self, AgentClass::Person | AgentClass::Bicycle)
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentClass::Person => "person",
            AgentClass::Bicycle => "bicycle",
            AgentClass::Car => "car",
            AgentClass::Motorcycle => "motorcycle",
            AgentClass::Bus => "bus",
            AgentClass::Truck => "truck",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub agent_id: AgentId,
    pub class: AgentClass,
    pub presence: Vec<bool>,
}

impl Tracklet {
    pub fn vulnerable(&self) -> bool {
        self.class.is_vulnerable()
    }

    pub fn present_frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.presence.iter().enumerate().filter(|(_, p)| **p).map(|(t, _)| t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentFrameState {
    pub t: usize,
    pub position: Point3,
    pub appearance: Vec<f64>,
    pub observation: Option<PixelObservation>,
}

/// One tracked road agent; `states` holds exactly one entry per present frame, in frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub tracklet: Tracklet,
    pub states: Vec<AgentFrameState>,
}

impl Agent {
    pub fn id(&self) -> AgentId {
        self.tracklet.agent_id
    }

    pub fn state_at(&self, t: usize) -> Option<&AgentFrameState> {
        self.states.binary_search_by_key(&t, |s| s.t).ok().map(|i| &self.states[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub gamma: usize,
    pub fps: f64,
    pub intrinsics: CameraIntrinsics,
    pub ego_feature: Vec<f64>,
    pub context: Vec<Vec<f64>>,
    pub agents: Vec<Agent>,
    pub label: String,
    pub ground_truth_risk: Option<AgentId>,
    pub ground_truth_group: Option<Vec<AgentId>>,
}

impl Scenario {
    pub fn feature_dim(&self) -> usize {
        self.ego_feature.len()
    }

    pub fn agent(&self, id: AgentId) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id() == id)
    }

    pub fn agent_ids(&self) -> Vec<AgentId> {
        self.agents.iter().map(Agent::id).collect()
    }

    /// Checks every structural invariant; errors name the offending field and index.
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::invariant("gamma", "must be at least 1"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::invariant("fps", format!("must be positive, got {}", self.fps)));
        }
        self.intrinsics.validate()?;
        let f = self.feature_dim();
        if f == 0 {
            return Err(Error::invariant("ego_feature", "must be non-empty"));
        }
        if self.context.len() != self.gamma {
            return Err(Error::invariant(
                "context",
                format!("expected {} frames, found {}", self.gamma, self.context.len()),
            ));
        }
        for (t, c) in self.context.iter().enumerate() {
            if c.len() != f {
                return Err(Error::invariant(format!("context[{t}]"), format!("expected length {f}, found {}", c.len())));
            }
        }
        let mut seen = BTreeSet::new();
        for (ai, agent) in self.agents.iter().enumerate() {
            let tr = &agent.tracklet;
            if !seen.insert(tr.agent_id) {
                return Err(Error::invariant(format!("agents[{ai}].agent_id"), format!("duplicate id {}", tr.agent_id)));
            }
            if tr.presence.len() != self.gamma {
                return Err(Error::invariant(
                    format!("agents[{ai}].presence"),
                    format!("length {} does not match gamma {}", tr.presence.len(), self.gamma),
                ));
            }
            let frames: Vec<usize> = tr.present_frames().collect();
            if frames.is_empty() {
                return Err(Error::invariant(format!("agents[{ai}].presence"), "no present frame"));
            }
            if frames.len() != agent.states.len() {
                return Err(Error::invariant(
                    format!("agents[{ai}].states"),
                    format!("{} states for {} present frames", agent.states.len(), frames.len()),
                ));
            }
            for (si, (state, &t)) in agent.states.iter().zip(&frames).enumerate() {
                if state.t != t {
                    return Err(Error::invariant(
                        format!("agents[{ai}].states[{si}].t"),
                        format!("expected frame {t}, found {}", state.t),
                    ));
                }
                if state.appearance.len() != f {
                    return Err(Error::invariant(
                        format!("agents[{ai}].states[{si}].appearance"),
                        format!("expected length {f}, found {}", state.appearance.len()),
                    ));
                }
                if !state.position.is_finite() {
                    return Err(Error::invariant(format!("agents[{ai}].states[{si}].position"), "non-finite"));
                }
            }
        }
        Ok(())
    }
}

/// Scene-prior fusion of an appearance vector with the frame context (element-wise sum).
pub fn fuse_context(appearance: &[f64], context: &[f64]) -> Result<Vec<f64>> {
    if appearance.len() != context.len() {
        return Err(Error::Shape(format!(
            "appearance length {} vs context length {}",
            appearance.len(),
            context.len()
        )));
    }
    Ok(appearance.iter().zip(context).map(|(a, c)| a + c).collect())
}

/// Removes one agent's tracklet and every frame state before graph construction.
pub fn mask_agent(s: &Scenario, agent_id: AgentId) -> Result<Scenario> {
    mask_group(s, &[agent_id])
}

/// Removes a set of agents in a single intervention.
pub fn mask_group(s: &Scenario, agent_ids: &[AgentId]) -> Result<Scenario> {
    if let Some(&missing) = agent_ids.iter().find(|id| s.agent(**id).is_none()) {
        return Err(Error::NotFound(missing));
    }
    let mut out = s.clone();
    out.agents.retain(|a| !agent_ids.contains(&a.id()));
    Ok(out)
}

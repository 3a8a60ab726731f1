use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Agent, AgentClass, AgentFrameState, AgentId, Scenario, Tracklet};
use crate::error::{Error, Result};
use crate::geometry::{inverse_project, CameraIntrinsics, PixelObservation, Point3};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    schema_version: u32,
    gamma: usize,
    fps: f64,
    intrinsics: CameraIntrinsics,
    ego_feature: Vec<f64>,
    context: Vec<Vec<f64>>,
    agents: Vec<AgentRecord>,
    label: String,
    ground_truth_risk: Option<AgentId>,
    ground_truth_group: Option<Vec<AgentId>>,
}

#[derive(Serialize, Deserialize)]
struct AgentRecord {
    agent_id: AgentId,
    class: AgentClass,
    presence: Vec<u8>,
    states: Vec<StateRecord>,
}

/// A state carries either a camera-frame `position` or a raw pixel `observation`
/// (box center plus depth) that is lifted with the scenario intrinsics on load.
#[derive(Serialize, Deserialize)]
struct StateRecord {
    t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    position: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    observation: Option<PixelObservation>,
    appearance: Vec<f64>,
}

pub fn scenario_to_json(s: &Scenario) -> String {
    let file = ScenarioFile {
        schema_version: SCENARIO_SCHEMA_VERSION,
        gamma: s.gamma,
        fps: s.fps,
        intrinsics: s.intrinsics,
        ego_feature: s.ego_feature.clone(),
        context: s.context.clone(),
        agents: s
            .agents
            .iter()
            .map(|a| AgentRecord {
                agent_id: a.tracklet.agent_id,
                class: a.tracklet.class,
                presence: a.tracklet.presence.iter().map(|&p| p as u8).collect(),
                states: a
                    .states
                    .iter()
                    .map(|st| StateRecord {
                        t: st.t,
                        position: Some(st.position.to_array()),
                        observation: st.observation,
                        appearance: st.appearance.clone(),
                    })
                    .collect(),
            })
            .collect(),
        label: s.label.clone(),
        ground_truth_risk: s.ground_truth_risk,
        ground_truth_group: s.ground_truth_group.clone(),
    };
    serde_json::to_string_pretty(&file).expect("scenario serialization is infallible")
}

pub fn scenario_from_json(text: &str) -> Result<Scenario> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Parse { field: "<document>".into(), message: e.to_string() })?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == SCENARIO_SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(Error::Schema { found: v as u32, expected: SCENARIO_SCHEMA_VERSION }),
        None => {
            return Err(Error::Parse { field: "schema_version".into(), message: "missing or not an integer".into() })
        }
    }
    let file: ScenarioFile = serde_json::from_value(value).map_err(|e| {
        let message = e.to_string();
        let field = message
            .split('`')
            .nth(1)
            .filter(|_| message.starts_with("missing field") || message.starts_with("unknown"))
            .unwrap_or("<document>")
            .to_string();
        Error::Parse { field, message }
    })?;

    let mut agents = Vec::with_capacity(file.agents.len());
    for (ai, rec) in file.agents.into_iter().enumerate() {
        let mut presence = Vec::with_capacity(rec.presence.len());
        for (t, &p) in rec.presence.iter().enumerate() {
            match p {
                0 => presence.push(false),
                1 => presence.push(true),
                other => {
                    return Err(Error::Parse {
                        field: format!("agents[{ai}].presence[{t}]"),
                        message: format!("expected 0 or 1, found {other}"),
                    })
                }
            }
        }
        let mut states = Vec::with_capacity(rec.states.len());
        for (si, st) in rec.states.into_iter().enumerate() {
            let position = match (st.position, &st.observation) {
                (Some(p), _) => Point3::from(p),
                (None, Some(obs)) => inverse_project(obs, &file.intrinsics).map_err(|e| Error::Parse {
                    field: format!("agents[{ai}].states[{si}].observation"),
                    message: e.to_string(),
                })?,
                (None, None) => {
                    return Err(Error::Parse {
                        field: format!("agents[{ai}].states[{si}].position"),
                        message: "state needs a position or an observation".into(),
                    })
                }
            };
            states.push(AgentFrameState { t: st.t, position, appearance: st.appearance, observation: st.observation });
        }
        agents.push(Agent { tracklet: Tracklet { agent_id: rec.agent_id, class: rec.class, presence }, states });
    }

    let scenario = Scenario {
        gamma: file.gamma,
        fps: file.fps,
        intrinsics: file.intrinsics,
        ego_feature: file.ego_feature,
        context: file.context,
        agents,
        label: file.label,
        ground_truth_risk: file.ground_truth_risk,
        ground_truth_group: file.ground_truth_group,
    };
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scenario_from_json(&text)
}

pub fn save_scenario(s: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scenario_to_json(s)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, GeneratorConfig};

    #[test]
    fn roundtrip_generated() {
        let cfg = GeneratorConfig::default();
        for seed in 0..5 {
            let s = generate_scenario(&cfg, seed).unwrap();
            let back = scenario_from_json(&scenario_to_json(&s)).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let s = generate_scenario(&GeneratorConfig::default(), 42).unwrap();
        save_scenario(&s, &path).unwrap();
        assert_eq!(load_scenario(&path).unwrap(), s);
        assert!(matches!(load_scenario(dir.path().join("missing.json")), Err(Error::Io { .. })));
    }

    fn edit(f: impl FnOnce(&mut serde_json::Value)) -> Result<Scenario> {
        let s = generate_scenario(&GeneratorConfig::default(), 3).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&scenario_to_json(&s)).unwrap();
        f(&mut v);
        scenario_from_json(&v.to_string())
    }

    #[test]
    fn missing_gamma_names_field() {
        let err = edit(|v| {
            v.as_object_mut().unwrap().remove("gamma");
        })
        .unwrap_err();
        match err {
            Error::Parse { field, .. } => assert_eq!(field, "gamma"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn schema_version_checked() {
        let err = edit(|v| v["schema_version"] = 7.into()).unwrap_err();
        assert!(matches!(err, Error::Schema { found: 7, expected: 1 }));
    }

    #[test]
    fn long_presence_is_invariant_error() {
        let err = edit(|v| v["agents"][0]["presence"].as_array_mut().unwrap().push(0.into())).unwrap_err();
        match err {
            Error::Invariant { field, .. } => assert_eq!(field, "agents[0].presence"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn observation_is_lifted() {
        let s = edit(|v| {
            v["intrinsics"] = serde_json::json!({"fx": 1.0, "fy": 1.0, "cx": 3.0, "cy": 4.0});
            let st = &mut v["agents"][0]["states"][0];
            st.as_object_mut().unwrap().remove("position");
            st["observation"] = serde_json::json!({"u": 3.0, "v": 4.0, "depth": 2.0});
        })
        .unwrap();
        assert_eq!(s.agents[0].states[0].position, Point3::new(0.0, 0.0, 2.0));
    }
}

//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! process exits non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use riskgraph::geometry::Point3;
use riskgraph::graph::{build_adjacency_frame, fourier_map, normalize_interactions, EdgeConfig, EdgeParams, NodeSet};
use riskgraph::risk::{evaluate_recall, group_risk_score, risk_scores, RecallOptions};
use riskgraph::scenario::{
    generate_dataset, generate_scenario_of_kind, mask_agent, scenario_from_json, scenario_to_json, GeneratorConfig,
    Scenario, ScenarioKind, Split,
};
use riskgraph::stgcn::{
    forward, grad_check, reference_scenario, train, Adam, GradCheckOptions, Mode, ModelConfig, ModelParams,
    TrainConfig,
};

const ROW_SUM_TOL: f64 = 1e-9;
const INVARIANCE_TOL: f64 = 1e-12;
const FOURIER_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const EQUIVALENCE_TOL: f64 = 1e-12;
const PERMUTATION_TOL: f64 = 1e-12;
const OVERFIT_TARGET: f64 = 0.95;
const OVERFIT_EPOCHS: usize = 300;
const RECALL_TARGET: f64 = 0.8;
const GROUP_TARGET: f64 = 0.7;
const SEEDS: [u64; 3] = [0, 1, 2];

const RECALL_TRAIN: usize = 400;
const RECALL_TEST: usize = 200;
const RECALL_EPOCHS: usize = 30;
const GROUP_CASES: usize = 20;

type Outcome = (bool, String);
type Check = (&'static str, fn() -> Outcome);

fn one_core<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool").install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

fn random_nodes(rng: &mut ChaCha8Rng, feature_dim: usize) -> NodeSet {
    let agents = rng.random_range(1..=8);
    let n = agents + 1;
    let present = Array2::from_shape_fn((1, n), |(_, i)| i == 0 || rng.random_bool(0.8));
    let positions = vec![(0..n)
        .map(|i| {
            if i == 0 || !present[[0, i]] {
                Point3::ORIGIN
            } else {
                Point3::new(rng.random_range(-4.0..4.0), rng.random_range(-0.5..0.5), rng.random_range(0.0..6.0))
            }
        })
        .collect()];
    let features = Array3::from_shape_fn((1, n, feature_dim), |(_, i, _)| {
        if present[[0, i]] {
            rng.random_range(-1.0..1.0)
        } else {
            0.0
        }
    });
    NodeSet {
        gamma: 1,
        agent_ids: (1..=agents as u64).collect(),
        vulnerable: (0..n).map(|i| i > 0 && rng.random_bool(0.5)).collect(),
        present,
        positions,
        features,
    }
}

fn row_stochasticity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let width = 8;
    let mut worst = 0.0f64;
    let mut absent_ok = true;
    for _ in 0..1000 {
        let config = EdgeConfig { embed_dim: 8, mu: rng.random_range(1.0..5.0), ..EdgeConfig::default() };
        let params = EdgeParams::init(&config, 1, width, &mut rng).expect("edge params");
        let nodes = random_nodes(&mut rng, width);
        let x = nodes.features.index_axis(Axis(0), 0).to_owned();
        let g = build_adjacency_frame(&nodes, 0, x.view(), &params, 0).expect("frame");
        for (i, row) in g.outer_iter().enumerate() {
            if nodes.present[[0, i]] {
                worst = worst.max((row.sum() - 1.0).abs());
            } else {
                absent_ok &= row.iter().all(|&v| v == 0.0);
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= ROW_SUM_TOL && absent_ok && elapsed < Duration::from_secs(10);
    (pass, format!("1000 frames, max |row sum - 1| = {worst:.2e}, absent rows zero: {absent_ok}, {elapsed:.2?}"))
}

fn normalization_invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=9);
        let present: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.8)).collect();
        let valid = Array2::from_shape_fn((n, n), |(i, j)| present[i] && present[j] && (i == j || rng.random_bool(0.7)));
        let fp = Array2::from_shape_simple_fn((n, n), || rng.random_range(0.05..3.0));
        let fa = Array2::from_shape_simple_fn((n, n), || rng.random_range(-4.0..4.0));
        let base = normalize_interactions(fp.view(), fa.view(), valid.view(), &present).g;
        let shifts = Array1::from_shape_simple_fn(n, || rng.random_range(-50.0..50.0));
        let scales = Array1::from_shape_simple_fn(n, || rng.random_range(0.01..100.0));
        let shifted = &fa + &shifts.clone().insert_axis(Axis(1));
        let scaled = &fp * &scales.clone().insert_axis(Axis(1));
        for g in [
            normalize_interactions(fp.view(), shifted.view(), valid.view(), &present).g,
            normalize_interactions(scaled.view(), fa.view(), valid.view(), &present).g,
        ] {
            worst = worst.max((&g - &base).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
        }
    }
    (worst <= INVARIANCE_TOL, format!("100 instances, max deviation {worst:.2e}"))
}

fn fourier_norm() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let config = EdgeConfig::default();
    let params = EdgeParams::init(&config, 1, 8, &mut rng).expect("edge params");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let v = Array1::from_shape_simple_fn(config.pos_dim, || rng.random_range(-10.0..10.0));
        let g = fourier_map(v.view(), &params.fourier).expect("mapping");
        worst = worst.max((g.dot(&g) - config.fourier_k as f64).abs());
    }
    (worst <= FOURIER_TOL, format!("d={}, k={}, max |norm^2 - k| = {worst:.2e}", config.pos_dim, config.fourier_k))
}

fn reference_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        width: 8,
        layers: 3,
        tau: 3,
        edge: EdgeConfig { embed_dim: 8, ..EdgeConfig::default() },
        ..ModelConfig::default()
    }
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions { h: GRAD_STEP, tol: GRAD_TOL, ..GradCheckOptions::default() };
    let mut parts = Vec::new();
    let mut pass = true;
    for seed in SEEDS {
        let params = ModelParams::init(&reference_config(), seed).expect("params");
        let batch = [reference_scenario(2 * seed, 4, 2, 8), reference_scenario(2 * seed + 1, 4, 2, 8)];
        let r = grad_check(&params, &batch, &opts).expect("grad check");
        pass &= r.passed;
        parts.push(format!(
            "seed {seed}: max {:.2e} ({}), {} checked, {} skipped",
            r.max_error,
            r.max_error_tensor.unwrap_or_default(),
            r.checked_coords,
            r.skipped_kink_coords
        ));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(120);
    (pass, format!("{}; {elapsed:.2?}", parts.join("; ")))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Drops one agent by editing the serialized document, independently of the masking code.
fn authored_without(s: &Scenario, id: u64) -> Scenario {
    let mut doc: serde_json::Value = serde_json::from_str(&scenario_to_json(s)).expect("json");
    doc["agents"].as_array_mut().expect("agents").retain(|a| a["agent_id"].as_u64() != Some(id));
    doc["ground_truth_risk"] = serde_json::Value::Null;
    doc["ground_truth_group"] = serde_json::Value::Null;
    scenario_from_json(&doc.to_string()).expect("authored scenario")
}

fn mixed_scenario(gen: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Scenario {
    let kind = [ScenarioKind::Go, ScenarioKind::Stop, ScenarioKind::GroupStop][rng.random_range(0..3)];
    generate_scenario_of_kind(gen, kind, rng.random()).expect("scenario")
}

fn intervention_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let gen = GeneratorConfig { feature_dim: 8, gamma: 8, min_agents: 2, ..GeneratorConfig::default() };
    let params = ModelParams::init(&reference_config(), 5).expect("params");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = mixed_scenario(&gen, &mut rng);
        let id = *s.agent_ids().choose(&mut rng).expect("agents");
        let masked = forward(&mask_agent(&s, id).expect("mask"), &params, Mode::Eval).expect("forward");
        let authored = forward(&authored_without(&s, id), &params, Mode::Eval).expect("forward");
        worst = worst.max(max_abs_diff(&masked, &authored));
    }
    (worst <= EQUIVALENCE_TOL, format!("100 pairs, max probability difference {worst:.2e}"))
}

fn permutation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let gen = GeneratorConfig { feature_dim: 8, gamma: 8, min_agents: 2, ..GeneratorConfig::default() };
    let params = ModelParams::init(&reference_config(), 6).expect("params");
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let s = mixed_scenario(&gen, &mut rng);
        let mut doc: serde_json::Value = serde_json::from_str(&scenario_to_json(&s)).expect("json");
        doc["agents"].as_array_mut().expect("agents").shuffle(&mut rng);
        let shuffled = scenario_from_json(&doc.to_string()).expect("shuffled");
        let a = forward(&s, &params, Mode::Eval).expect("forward");
        let b = forward(&shuffled, &params, Mode::Eval).expect("forward");
        worst = worst.max(max_abs_diff(&a, &b));
    }
    (worst < PERMUTATION_TOL, format!("50 shuffles, max probability difference {worst:.2e}"))
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let gen = GeneratorConfig::default();
    let scenarios: Vec<Scenario> = (0..32)
        .map(|i| {
            let kind = if i % 2 == 0 { ScenarioKind::Go } else { ScenarioKind::Stop };
            generate_scenario_of_kind(&gen, kind, 7000 + i).expect("scenario")
        })
        .collect();
    let config = ModelConfig { feature_dim: gen.feature_dim, width: 16, ..ModelConfig::default() };
    let cfg = TrainConfig {
        optimizer: Adam::default(),
        epochs: OVERFIT_EPOCHS,
        batch_size: 8,
        seed: 7,
        target_train_accuracy: Some(OVERFIT_TARGET),
    };
    let history = one_core(|| {
        let mut params = ModelParams::init(&config, 7).expect("params");
        train(&mut params, &scenarios, &[], &cfg).expect("training")
    });
    let elapsed = start.elapsed();
    let best = history.epochs.iter().map(|e| e.train_accuracy).fold(0.0, f64::max);
    let pass = best >= OVERFIT_TARGET && elapsed < Duration::from_secs(600);
    (pass, format!("train accuracy {best:.3} after {} epochs, one core, {elapsed:.2?}", history.epochs.len()))
}

struct RecallRun {
    seed: u64,
    model: ModelParams,
    recall: f64,
    elapsed: Duration,
}

fn recall_runs() -> &'static Vec<RecallRun> {
    static RUNS: OnceLock<Vec<RecallRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let start = Instant::now();
                let dir = tempfile::tempdir().expect("tempdir");
                let gen = GeneratorConfig { train_fraction: 1.0, val_fraction: 0.0, ..GeneratorConfig::default() };
                let train_set = generate_dataset(&gen, RECALL_TRAIN, 1_000_000 * (seed + 1), dir.path().join("train"))
                    .and_then(|m| m.load_split(Split::Train))
                    .expect("train set");
                let stops = GeneratorConfig { stop_fraction: 1.0, ..gen.clone() };
                let test_set: Vec<(PathBuf, Scenario)> =
                    generate_dataset(&stops, RECALL_TEST, 1_000_000 * (seed + 1) + 500_000, dir.path().join("test"))
                        .and_then(|m| m.load_split(Split::Train))
                        .expect("test set");
                let config = ModelConfig { feature_dim: gen.feature_dim, width: 16, ..ModelConfig::default() };
                let mut model = ModelParams::init(&config, seed).expect("params");
                let scenarios: Vec<Scenario> = train_set.into_iter().map(|(_, s)| s).collect();
                let cfg = TrainConfig { epochs: RECALL_EPOCHS, batch_size: 16, seed, ..TrainConfig::default() };
                train(&mut model, &scenarios, &[], &cfg).expect("training");
                let recall = evaluate_recall(&test_set, &model, &RecallOptions::default()).expect("recall").recall;
                RecallRun { seed, model, recall, elapsed: start.elapsed() }
            })
            .collect()
    })
}

fn risk_recall() -> Outcome {
    let runs = recall_runs();
    let values: Vec<f64> = runs.iter().map(|r| r.recall).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    let total: Duration = runs.iter().map(|r| r.elapsed).sum();
    let per_seed: Vec<String> = runs.iter().map(|r| format!("seed {} {:.3}", r.seed, r.recall)).collect();
    let pass = mean >= RECALL_TARGET && total < Duration::from_secs(1800);
    (pass, format!("mean recall {mean:.3} (variance {var:.2e}; {}), {total:.2?}", per_seed.join(", ")))
}

fn group_consistency() -> Outcome {
    let gen = GeneratorConfig::default();
    let mut wins = 0;
    let mut cases = 0;
    let mut per_seed = Vec::new();
    for run in recall_runs() {
        let mut seed_wins = 0;
        for i in 0..GROUP_CASES {
            let s = generate_scenario_of_kind(&gen, ScenarioKind::GroupStop, 9_000_000 + 1000 * run.seed + i as u64)
                .expect("group scenario");
            let members = s.ground_truth_group.clone().expect("planted group");
            let together = group_risk_score(&s, &run.model, &members).expect("group score");
            let alone: Vec<f64> =
                members.iter().map(|&m| group_risk_score(&s, &run.model, &[m]).expect("member score")).collect();
            if alone.iter().all(|&v| together > v) {
                seed_wins += 1;
            }
        }
        per_seed.push(format!("seed {} {seed_wins}/{GROUP_CASES}", run.seed));
        wins += seed_wins;
        cases += GROUP_CASES;
    }
    let rate = wins as f64 / cases as f64;
    (rate >= GROUP_TARGET, format!("group beats every member in {rate:.3} of cases ({})", per_seed.join(", ")))
}

fn determinism() -> Outcome {
    let gen = GeneratorConfig::default();
    let scenarios: Vec<Scenario> = (0..24)
        .map(|i| {
            let kind = if i % 2 == 0 { ScenarioKind::Go } else { ScenarioKind::Stop };
            generate_scenario_of_kind(&gen, kind, 4200 + i).expect("scenario")
        })
        .collect();
    let probe = generate_scenario_of_kind(&gen, ScenarioKind::Stop, 4299).expect("probe");
    let config = ModelConfig { feature_dim: gen.feature_dim, width: 8, ..ModelConfig::default() };
    let cfg = TrainConfig { epochs: 4, batch_size: 6, seed: 3, ..TrainConfig::default() };
    let run = || {
        let mut params = ModelParams::init(&config, 3).expect("params");
        let history = train(&mut params, &scenarios, &[], &cfg).expect("training");
        let report = risk_scores(&probe, &params, f64::MIN_POSITIVE).expect("report");
        (params.to_json(), history.digest(), serde_json::to_string(&report).expect("report json"))
    };
    let first = one_core(run);
    let second = one_core(run);
    let pooled = run();
    let serial = first == second;
    let across_pools = first == pooled;
    (serial && across_pools, format!("serial reruns identical: {serial}; serial vs default pool identical: {across_pools}"))
}

fn main() {
    let criteria: [Check; 10] = [
        ("adjacency row stochasticity", row_stochasticity),
        ("normalization invariances", normalization_invariances),
        ("Fourier mapping norm", fourier_norm),
        ("gradient check", gradient_check),
        ("intervention equivalence", intervention_equivalence),
        ("permutation invariance", permutation_invariance),
        ("overfitting capability", overfit),
        ("end-to-end risk recall", risk_recall),
        ("group consistency", group_consistency),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (pass, detail) = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += !pass as usize;
        println!("criterion {:>2} {} {name}: {detail}", i + 1, if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

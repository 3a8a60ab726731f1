use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use riskgraph::risk::{
    evaluate_recall, group_risk_score, identify_risk_group, risk_scores, GroupResult, RecallOptions, DEFAULT_DELTA,
    DEFAULT_ETA,
};
use riskgraph::scenario::{generate_dataset, load_scenario, DatasetManifest, GeneratorConfig, Scenario, Split};
use riskgraph::stgcn::{
    first_layer_adjacency, grad_check, predict, reference_scenario, train, GradCheckOptions, ModelConfig, ModelParams,
    TrainConfig,
};
use riskgraph::graph::EdgeConfig;

const REPORT_SCHEMA_VERSION: u32 = 1;

mod exit {
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const DIVERGED: u8 = 4;
    pub const GRADCHECK: u8 = 5;
}

#[derive(Parser, Debug)]
#[command(name = "riskgraph", version, about = "Traffic interaction graphs, behavior classification and risk-object ranking")]
struct Cli {
    /// Worker threads; 1 gives the serial reference behavior.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a rule-labeled synthetic dataset.
    Generate(GenerateArgs),
    /// Train a behavior classifier on a dataset's train split.
    Train(TrainArgs),
    /// Classification metrics and risk recall on a dataset split.
    Eval(EvalArgs),
    /// Rank the agents of one scenario by intervention.
    Risk(RiskArgs),
    /// Compare analytic gradients with finite differences on a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Generator config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Training file layout: `{"model": {...}, "train": {...}}`, both optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Hidden width.
    #[arg(long)]
    width: Option<usize>,
    /// Interaction distance threshold in meters.
    #[arg(long)]
    mu: Option<f64>,
    /// Stop early once training accuracy reaches this value.
    #[arg(long)]
    target_accuracy: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, default_value_t = DEFAULT_ETA)]
    eta: f64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct RiskArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, default_value_t = DEFAULT_ETA)]
    eta: f64,
    /// Score this set of agents removed together.
    #[arg(long, value_delimiter = ',')]
    group: Option<Vec<u64>>,
    /// Select the group by ego interaction strength above eta and score it.
    #[arg(long, conflicts_with = "group")]
    auto_group: bool,
    /// Also write the first-layer adjacency to graph.json.
    #[arg(long)]
    dump_graph: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    gamma: usize,
    #[arg(long, default_value_t = 2)]
    agents: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug)]
struct GradcheckFailed(f64, Option<String>);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: max relative error {:e}", self.0)?;
        if let Some(t) = &self.1 {
            write!(f, " in {t}")?;
        }
        Ok(())
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use riskgraph::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<GradcheckFailed>().is_some() {
            return exit::GRADCHECK;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } => exit::IO,
                E::Training(_) | E::Numeric(_) => exit::DIVERGED,
                _ => exit::CONFIG,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::CONFIG
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| riskgraph::Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| riskgraph::Error::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text).map_err(|e| {
        riskgraph::Error::Parse { field: path.display().to_string(), message: e.to_string() }.into()
    })
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| riskgraph::Error::Io { path: dir.to_path_buf(), source: e })?;
    Ok(())
}

fn run_record(command: &str, seed: u64, threads: Option<usize>, config: serde_json::Value) -> serde_json::Value {
    json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "command": command,
        "seed": seed,
        "threads": threads,
        "config": config,
    })
}

fn cmd_generate(args: &GenerateArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let cfg: GeneratorConfig = read_config(args.config.as_deref())?;
    create_out(&args.out)?;
    let manifest = generate_dataset(&cfg, args.n, args.seed, &args.out)?;
    let config = json!({ "generator": cfg, "n": args.n, "out": args.out, "config_digest": manifest.config_digest });
    write_json(&args.out.join("run.json"), &run_record("generate", args.seed, threads, config))?;
    println!("{}", args.out.join(riskgraph::scenario::MANIFEST_FILE).display());
    Ok(())
}

fn load_labeled(manifest: &DatasetManifest, split: Split) -> anyhow::Result<Vec<(PathBuf, Scenario)>> {
    Ok(manifest.load_split(split)?)
}

fn cmd_train(args: &TrainArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let mut file: TrainFile = read_config(args.config.as_deref())?;
    let manifest = DatasetManifest::load(&args.data)?;
    file.model.feature_dim = manifest.config.feature_dim;
    if let Some(w) = args.width {
        file.model.width = w;
    }
    if let Some(mu) = args.mu {
        file.model.edge = EdgeConfig { mu, ..file.model.edge };
    }
    let t = &mut file.train;
    t.seed = args.seed;
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.optimizer.lr = args.lr.unwrap_or(t.optimizer.lr);
    if args.target_accuracy.is_some() {
        t.target_train_accuracy = args.target_accuracy;
    }

    let train_set: Vec<Scenario> = load_labeled(&manifest, Split::Train)?.into_iter().map(|(_, s)| s).collect();
    if train_set.is_empty() {
        bail!(riskgraph::Error::Config("the train split is empty".into()));
    }
    let val_set: Vec<Scenario> = load_labeled(&manifest, Split::Val)?.into_iter().map(|(_, s)| s).collect();
    create_out(&args.out)?;
    let mut params = ModelParams::init(&file.model, args.seed)?;
    let history = train(&mut params, &train_set, &val_set, &file.train)?;

    let model_path = args.out.join("model.json");
    params.save(&model_path)?;
    let history_doc = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "seed": args.seed,
        "digest": history.digest(),
        "epochs": history.epochs,
    });
    write_json(&args.out.join("history.json"), &history_doc)?;
    let config = json!({
        "model": file.model,
        "train": file.train,
        "data": args.data,
        "dataset_digest": manifest.config_digest,
        "model_digest": params.digest(),
    });
    write_json(&args.out.join("run.json"), &run_record("train", args.seed, threads, config))?;
    println!("{}", model_path.display());
    Ok(())
}

#[derive(Serialize)]
struct ClassMetrics {
    support: usize,
    predicted: usize,
    precision: Option<f64>,
    recall: Option<f64>,
}

fn cmd_eval(args: &EvalArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let model = ModelParams::load(&args.model)?;
    let manifest = DatasetManifest::load(&args.data)?;
    let split: Split = args.split.into();
    let scenarios = load_labeled(&manifest, split)?;
    if scenarios.is_empty() {
        bail!(riskgraph::Error::Config(format!("split {:?} is empty", args.split)));
    }
    let labels: Vec<usize> =
        scenarios.iter().map(|(_, s)| model.config.class_index(&s.label)).collect::<riskgraph::Result<_>>()?;
    let owned: Vec<Scenario> = scenarios.iter().map(|(_, s)| s.clone()).collect();
    let probs = predict(&model, &owned)?;
    let k = model.config.num_classes();
    let mut confusion = vec![vec![0usize; k]; k];
    for (p, &y) in probs.iter().zip(&labels) {
        let guess = p.iter().enumerate().fold(0, |b, (i, &v)| if v > p[b] { i } else { b });
        confusion[y][guess] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class: serde_json::Map<String, serde_json::Value> = (0..k)
        .map(|c| {
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
            let m = ClassMetrics {
                support,
                predicted,
                precision: ratio(confusion[c][c], predicted),
                recall: ratio(confusion[c][c], support),
            };
            (model.config.class_names[c].clone(), serde_json::to_value(m).expect("plain data"))
        })
        .collect();

    let annotated: Vec<(PathBuf, Scenario)> = scenarios
        .into_iter()
        .filter(|(_, s)| s.ground_truth_risk.is_some() || s.ground_truth_group.is_some())
        .collect();
    let mut report = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "seed": model.seed,
        "split": args.split,
        "model_digest": model.digest(),
        "count": labels.len(),
        "accuracy": correct as f64 / labels.len() as f64,
        "per_class": per_class,
        "confusion": confusion,
    });
    if !annotated.is_empty() {
        let recall = evaluate_recall(&annotated, &model, &RecallOptions { delta: args.delta, eta: args.eta })?;
        report["risk_recall"] = serde_json::to_value(recall)?;
    }
    create_out(&args.out)?;
    write_json(&args.out.join("eval.json"), &report)?;
    let config = json!({
        "data": args.data, "model": args.model, "split": args.split, "delta": args.delta, "eta": args.eta,
    });
    write_json(&args.out.join("run.json"), &run_record("eval", model.seed, threads, config))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_risk(args: &RiskArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let model = ModelParams::load(&args.model)?;
    let scenario = load_scenario(&args.scenario)?;
    let mut report = risk_scores(&scenario, &model, args.delta)?;
    report.scenario_path = Some(args.scenario.clone());
    if let Some(members) = &args.group {
        let score = group_risk_score(&scenario, &model, members)?;
        report.group = Some(GroupResult { members: members.clone(), score, eta: None });
    } else if args.auto_group {
        let members = identify_risk_group(&scenario, &model, args.eta)?;
        if !members.is_empty() {
            let score = group_risk_score(&scenario, &model, &members)?;
            report.group = Some(GroupResult { members, score, eta: Some(args.eta) });
        }
    }
    let mut doc = serde_json::to_value(&report)?;
    doc["schema_version"] = json!(REPORT_SCHEMA_VERSION);
    doc["seed"] = json!(model.seed);
    create_out(&args.out)?;
    write_json(&args.out.join("risk.json"), &doc)?;
    if args.dump_graph {
        let adj = first_layer_adjacency(&scenario, &model)?;
        let graph = json!({
            "schema_version": REPORT_SCHEMA_VERSION,
            "seed": model.seed,
            "node_agent_ids": std::iter::once(None).chain(adj.agent_ids.iter().map(|&id| Some(id))).collect::<Vec<_>>(),
            "valid": adj.valid.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            "adjacency": adj.to_nested(),
        });
        write_json(&args.out.join("graph.json"), &graph)?;
    }
    let config = json!({
        "scenario": args.scenario, "model": args.model, "delta": args.delta, "eta": args.eta,
        "group": args.group, "auto_group": args.auto_group, "dump_graph": args.dump_graph,
    });
    write_json(&args.out.join("run.json"), &run_record("risk", model.seed, threads, config))?;
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let config = ModelConfig {
        feature_dim: 8,
        width: args.width,
        edge: EdgeConfig { embed_dim: 8, ..EdgeConfig::default() },
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&config, args.seed)?;
    let batch: Vec<Scenario> = (0..2)
        .map(|i| reference_scenario(args.seed.wrapping_mul(2).wrapping_add(i), args.gamma, args.agents, config.feature_dim))
        .collect();
    let opts = GradCheckOptions { h: args.h, tol: args.tol, ..GradCheckOptions::default() };
    let report = grad_check(&params, &batch, &opts)?;
    let mut doc = serde_json::to_value(&report)?;
    doc["schema_version"] = json!(REPORT_SCHEMA_VERSION);
    doc["seed"] = json!(args.seed);
    create_out(&args.out)?;
    write_json(&args.out.join("gradcheck.json"), &doc)?;
    let resolved = json!({
        "model": config, "gamma": args.gamma, "agents": args.agents, "h": args.h, "tol": args.tol,
    });
    write_json(&args.out.join("run.json"), &run_record("gradcheck", args.seed, threads, resolved))?;
    println!(
        "{} max relative error {:e} ({} checked, {} skipped near kinks)",
        if report.passed { "PASS" } else { "FAIL" },
        report.max_error,
        report.checked_coords,
        report.skipped_kink_coords
    );
    if !report.passed {
        return Err(GradcheckFailed(report.max_error, report.max_error_tensor).into());
    }
    Ok(())
}

fn configure_threads(threads: Option<usize>) -> anyhow::Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        bail!(riskgraph::Error::Config("--threads must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| anyhow::anyhow!(e))?;
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    configure_threads(cli.threads)?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, cli.threads),
        Command::Train(a) => cmd_train(a, cli.threads).context("training failed"),
        Command::Eval(a) => cmd_eval(a, cli.threads),
        Command::Risk(a) => cmd_risk(a, cli.threads),
        Command::Gradcheck(a) => cmd_gradcheck(a, cli.threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

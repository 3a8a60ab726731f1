use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::graph::{EdgeConfig, EdgeParams, EdgeWeights};
use crate::scenario::{LABEL_GO, LABEL_STOP};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Per-channel batch statistics over valid node-frames, running averages in eval mode.
    Batch,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Appearance width F of the input features.
    pub feature_dim: usize,
    /// Hidden width C shared by all layers.
    pub width: usize,
    pub layers: usize,
    /// Temporal kernel span, odd.
    pub tau: usize,
    pub edge: EdgeConfig,
    /// Output class names by index.
    pub class_names: Vec<String>,
    pub norm: NormMode,
    pub norm_momentum: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            width: 16,
            layers: 3,
            tau: 3,
            edge: EdgeConfig::default(),
            class_names: vec![LABEL_GO.into(), LABEL_STOP.into()],
            norm: NormMode::Batch,
            norm_momentum: 0.1,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.width == 0 || self.layers == 0 {
            return Err(Error::Config("feature_dim, width and layers must be positive".into()));
        }
        if self.tau.is_multiple_of(2) {
            return Err(Error::Config(format!("tau must be odd, got {}", self.tau)));
        }
        if self.num_classes() < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if !(self.norm_eps > 0.0) || !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::Config("invalid normalization constants".into()));
        }
        self.edge.validate()
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Label(format!("label {label:?} not among {:?}", self.class_names)))
    }
}

/// Learned per-channel scale and shift applied after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAffine {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl NormAffine {
    fn identity(c: usize) -> Self {
        NormAffine { scale: Array1::ones(c), shift: Array1::zeros(c) }
    }

    fn zeros(c: usize) -> Self {
        NormAffine { scale: Array1::zeros(c), shift: Array1::zeros(c) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        RunningStats { mean: Array1::zeros(c), var: Array1::ones(c) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// C x C spatial weight.
    pub spatial: Array2<f64>,
    /// C x C temporal kernels, index `offset * 2 + vulnerable` with offset in `0..tau`.
    pub temporal: Vec<Array2<f64>>,
    pub norm_spatial: NormAffine,
    pub norm_temporal: NormAffine,
}

impl LayerWeights {
    pub fn kernel(&self, offset_index: usize, vulnerable: bool) -> &Array2<f64> {
        &self.temporal[offset_index * 2 + vulnerable as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetWeights {
    /// C x F input projection.
    pub input: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    /// classes x C
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl NetWeights {
    fn zeros_like(&self) -> Self {
        NetWeights {
            input: Array2::zeros(self.input.raw_dim()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    spatial: Array2::zeros(l.spatial.raw_dim()),
                    temporal: l.temporal.iter().map(|k| Array2::zeros(k.raw_dim())).collect(),
                    norm_spatial: NormAffine::zeros(l.norm_spatial.scale.len()),
                    norm_temporal: NormAffine::zeros(l.norm_temporal.scale.len()),
                })
                .collect(),
            head_weight: Array2::zeros(self.head_weight.raw_dim()),
            head_bias: Array1::zeros(self.head_bias.len()),
        }
    }
}

fn names(e: &EdgeWeights, n: &NetWeights) -> Vec<String> {
    let mut out = vec!["input".to_string()];
    for (l, lw) in n.layers.iter().enumerate() {
        out.push(format!("layer{l}.spatial"));
        for k in 0..lw.temporal.len() {
            out.push(format!("layer{l}.temporal{}.{}", k / 2, ["static", "vulnerable"][k % 2]));
        }
        for norm in ["norm_spatial", "norm_temporal"] {
            out.push(format!("layer{l}.{norm}.scale"));
            out.push(format!("layer{l}.{norm}.shift"));
        }
    }
    for l in 0..e.phi.len() {
        out.push(format!("layer{l}.phi"));
        out.push(format!("layer{l}.omega"));
    }
    for tag in ["static", "vulnerable"] {
        out.push(format!("theta.{tag}.weight"));
        out.push(format!("theta.{tag}.bias"));
    }
    out.extend(["pos_readout", "head.weight", "head.bias"].map(String::from));
    out
}

fn trainables<'a>(e: &'a EdgeWeights, n: &'a NetWeights) -> Vec<(String, ArrayViewD<'a, f64>)> {
    let mut views = vec![n.input.view().into_dyn()];
    for lw in &n.layers {
        views.push(lw.spatial.view().into_dyn());
        views.extend(lw.temporal.iter().map(|k| k.view().into_dyn()));
        for norm in [&lw.norm_spatial, &lw.norm_temporal] {
            views.push(norm.scale.view().into_dyn());
            views.push(norm.shift.view().into_dyn());
        }
    }
    for (phi, omega) in e.phi.iter().zip(&e.omega) {
        views.push(phi.view().into_dyn());
        views.push(omega.view().into_dyn());
    }
    for th in &e.theta {
        views.push(th.weight.view().into_dyn());
        views.push(th.bias.view().into_dyn());
    }
    views.push(e.readout.view().into_dyn());
    views.push(n.head_weight.view().into_dyn());
    views.push(n.head_bias.view().into_dyn());
    names(e, n).into_iter().zip(views).collect()
}

fn trainables_mut<'a>(e: &'a mut EdgeWeights, n: &'a mut NetWeights) -> Vec<(String, ArrayViewMutD<'a, f64>)> {
    let names = names(e, n);
    let mut views = vec![n.input.view_mut().into_dyn()];
    for lw in &mut n.layers {
        views.push(lw.spatial.view_mut().into_dyn());
        views.extend(lw.temporal.iter_mut().map(|k| k.view_mut().into_dyn()));
        for norm in [&mut lw.norm_spatial, &mut lw.norm_temporal] {
            views.push(norm.scale.view_mut().into_dyn());
            views.push(norm.shift.view_mut().into_dyn());
        }
    }
    for (phi, omega) in e.phi.iter_mut().zip(&mut e.omega) {
        views.push(phi.view_mut().into_dyn());
        views.push(omega.view_mut().into_dyn());
    }
    for th in &mut e.theta {
        views.push(th.weight.view_mut().into_dyn());
        views.push(th.bias.view_mut().into_dyn());
    }
    views.push(e.readout.view_mut().into_dyn());
    views.push(n.head_weight.view_mut().into_dyn());
    views.push(n.head_bias.view_mut().into_dyn());
    names.into_iter().zip(views).collect()
}

/// Gradient (or moment) storage shaped like the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub edges: EdgeWeights,
    pub net: NetWeights,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients { edges: params.edges.weights.zeros_like(), net: params.net.zeros_like() }
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        trainables(&self.edges, &self.net)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        trainables_mut(&mut self.edges, &mut self.net)
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut a) in self.tensors_mut() {
            a *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, t)| t.iter().map(|v| v.abs()).collect::<Vec<_>>()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub edges: EdgeParams,
    pub net: NetWeights,
    /// Per layer: spatial then temporal normalization statistics.
    pub running: Vec<[RunningStats; 2]>,
    pub seed: u64,
}

impl ModelParams {
    /// Uniform weights in `+-1/sqrt(fan_in)`; normalization starts as identity
    /// with unit running variance; the Fourier matrix is drawn from N(0, sigma^2).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, c, tau) = (config.feature_dim, config.width, config.tau);
        let mut uniform = |shape: (usize, usize), fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
        };
        let input = uniform((c, f), f);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                spatial: uniform((c, c), c),
                temporal: (0..2 * tau).map(|_| uniform((c, c), c * tau)).collect(),
                norm_spatial: NormAffine::identity(c),
                norm_temporal: NormAffine::identity(c),
            })
            .collect();
        let head_weight = uniform((config.num_classes(), c), c);
        let head_bias = uniform((1, config.num_classes()), c).index_axis_move(Axis(0), 0);
        let edges = EdgeParams::init(&config.edge, config.layers, c, &mut rng)?;
        Ok(ModelParams {
            config: config.clone(),
            edges,
            net: NetWeights { input, layers, head_weight, head_bias },
            running: (0..config.layers).map(|_| [RunningStats::new(c), RunningStats::new(c)]).collect(),
            seed,
        })
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        trainables(&self.edges.weights, &self.net)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        trainables_mut(&mut self.edges.weights, &mut self.net)
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_json(&self) -> String {
        let mut tensors = serde_json::Map::new();
        for (name, t) in self.tensors() {
            tensors.insert(name, nested(&t));
        }
        let running: Vec<Value> = self
            .running
            .iter()
            .map(|pair| {
                serde_json::json!({
                    "spatial": {"mean": pair[0].mean.to_vec(), "var": pair[0].var.to_vec()},
                    "temporal": {"mean": pair[1].mean.to_vec(), "var": pair[1].var.to_vec()},
                })
            })
            .collect();
        let c = &self.config;
        let doc = serde_json::json!({
            "schema_version": MODEL_SCHEMA_VERSION,
            "seed": self.seed,
            "hyper": {
                "L": c.layers, "tau": c.tau, "C": c.width, "F": c.feature_dim,
                "D": c.edge.embed_dim, "d": c.edge.pos_dim, "k": c.edge.fourier_k,
                "sigma": c.edge.sigma, "mu": c.edge.mu, "num_classes": c.num_classes(),
            },
            "config": serde_json::to_value(c).expect("config serializes"),
            "fourier": nested(&self.edges.fourier.view().into_dyn()),
            "running": running,
            "tensors": Value::Object(tensors),
        });
        serde_json::to_string_pretty(&doc).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let perr = |field: &str, message: String| Error::Parse { field: field.to_string(), message };
        let doc: Value = serde_json::from_str(text).map_err(|e| perr("<document>", e.to_string()))?;
        let version = doc.get("schema_version").and_then(Value::as_u64).ok_or_else(|| perr("schema_version", "missing".into()))?;
        if version != MODEL_SCHEMA_VERSION as u64 {
            return Err(Error::Schema { found: version as u32, expected: MODEL_SCHEMA_VERSION });
        }
        let config: ModelConfig = serde_json::from_value(doc.get("config").cloned().unwrap_or(Value::Null))
            .map_err(|e| perr("config", e.to_string()))?;
        let seed = doc.get("seed").and_then(Value::as_u64).ok_or_else(|| perr("seed", "missing".into()))?;
        let mut params = ModelParams::init(&config, seed)?;

        let tensors = doc.get("tensors").and_then(Value::as_object).ok_or_else(|| perr("tensors", "missing".into()))?;
        for (name, mut target) in params.tensors_mut() {
            let value = tensors.get(&name).ok_or_else(|| perr(&format!("tensors.{name}"), "missing".into()))?;
            let arr = from_nested(value).map_err(|m| perr(&format!("tensors.{name}"), m))?;
            if arr.shape() != target.shape() {
                return Err(Error::Shape(format!("{name}: file has {:?}, config implies {:?}", arr.shape(), target.shape())));
            }
            target.assign(&arr);
        }
        let fourier = from_nested(doc.get("fourier").unwrap_or(&Value::Null)).map_err(|m| perr("fourier", m))?;
        if fourier.shape() != params.edges.fourier.shape() {
            return Err(Error::Shape(format!("fourier: file has {:?}", fourier.shape())));
        }
        params.edges.fourier.assign(&fourier.into_dimensionality::<ndarray::Ix2>().expect("checked rank"));

        let running = doc.get("running").and_then(Value::as_array).ok_or_else(|| perr("running", "missing".into()))?;
        if running.len() != config.layers {
            return Err(Error::Shape(format!("running stats for {} layers, expected {}", running.len(), config.layers)));
        }
        for (l, entry) in running.iter().enumerate() {
            for (slot, key) in ["spatial", "temporal"].iter().enumerate() {
                for stat in ["mean", "var"] {
                    let field = format!("running[{l}].{key}.{stat}");
                    let v: Vec<f64> = serde_json::from_value(entry[key][stat].clone()).map_err(|e| perr(&field, e.to_string()))?;
                    if v.len() != config.width {
                        return Err(Error::Shape(format!("{field} has length {}", v.len())));
                    }
                    let target = &mut params.running[l][slot];
                    if stat == "mean" {
                        target.mean = Array1::from(v);
                    } else {
                        target.var = Array1::from(v);
                    }
                }
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Hex SHA-256 of the serialized model.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Trainable tensors keyed by name, for tests and reporting.
    pub fn tensor_map(&self) -> BTreeMap<String, ArrayD<f64>> {
        self.tensors().into_iter().map(|(n, t)| (n, t.to_owned())).collect()
    }
}

fn nested(t: &ArrayViewD<'_, f64>) -> Value {
    if t.ndim() == 0 {
        return serde_json::json!(t[IxDyn(&[])]);
    }
    if t.ndim() == 1 {
        return Value::Array(t.iter().map(|v| serde_json::json!(v)).collect());
    }
    Value::Array(t.outer_iter().map(|sub| nested(&sub)).collect())
}

fn from_nested(v: &Value) -> std::result::Result<ArrayD<f64>, String> {
    fn walk(v: &Value, depth: usize, shape: &mut Vec<usize>, data: &mut Vec<f64>) -> std::result::Result<(), String> {
        match v {
            Value::Number(n) => {
                if depth != shape.len() {
                    return Err("ragged nesting".into());
                }
                data.push(n.as_f64().ok_or("number out of range")?);
                Ok(())
            }
            Value::Array(items) => {
                if depth == shape.len() {
                    if !data.is_empty() {
                        return Err("ragged nesting".into());
                    }
                    shape.push(items.len());
                } else if depth > shape.len() || shape[depth] != items.len() {
                    return Err("ragged nesting".into());
                }
                items.iter().try_for_each(|it| walk(it, depth + 1, shape, data))
            }
            _ => Err("expected nested arrays of numbers".into()),
        }
    }
    let (mut shape, mut data) = (Vec::new(), Vec::new());
    walk(v, 0, &mut shape, &mut data)?;
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| e.to_string())
}

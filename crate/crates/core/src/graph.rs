//! Directed interaction graphs over the ego and road agents.
//!
//! For a present node `i` at frame `t` the weight toward node `j` is
//! `gate(i,j) * f_p(i,j) * exp(f_a(i,j))`, normalized over the row. `f_a` is a
//! scaled dot product of two learned projections of the node features and
//! `f_p` a ReLU readout of Fourier-mapped, vulnerability-specific position
//! embeddings. The gate keeps pairs within `mu` meters. Rows whose numerator
//! vanishes entirely fall back to a pure self connection.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euclidean_distance, Point3};
use crate::scenario::{fuse_context, AgentId, Scenario};

/// Slot of the ego node in every frame.
pub const EGO: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    /// Appearance embedding width.
    pub embed_dim: usize,
    /// Position embedding width.
    pub pos_dim: usize,
    /// Number of Fourier frequencies; the mapping has `2k` outputs.
    pub fourier_k: usize,
    pub sigma: f64,
    /// Interaction range in meters (inclusive).
    pub mu: f64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig { embed_dim: 256, pos_dim: 5, fourier_k: 30, sigma: 10.0, mu: 3.0 }
    }
}

impl EdgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.pos_dim == 0 || self.fourier_k == 0 {
            return Err(Error::Config("edge dimensions must be positive".into()));
        }
        if !(self.sigma > 0.0) || !(self.mu > 0.0) {
            return Err(Error::Config("sigma and mu must be positive".into()));
        }
        Ok(())
    }
}

/// Affine map from a 3D position to the position embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// 3 x d
    pub weight: Array2<f64>,
    /// d
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(dim: usize) -> Self {
        Affine { weight: Array2::zeros((3, dim)), bias: Array1::zeros(dim) }
    }

    pub fn apply(&self, p: Point3) -> Array1<f64> {
        let x = Array1::from_vec(p.to_array().to_vec());
        x.dot(&self.weight) + &self.bias
    }
}

/// Trainable edge parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    /// Per layer, C x D projection of the source node.
    pub phi: Vec<Array2<f64>>,
    /// Per layer, C x D projection of the target node.
    pub omega: Vec<Array2<f64>>,
    /// Position embedders indexed by the vulnerability flag.
    pub theta: [Affine; 2],
    /// Row of length 2k reading the Fourier features out to a scalar.
    pub readout: Array1<f64>,
}

impl EdgeWeights {
    pub fn zeros_like(&self) -> Self {
        EdgeWeights {
            phi: self.phi.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
            omega: self.omega.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
            theta: [Affine::zeros(self.theta[0].bias.len()), Affine::zeros(self.theta[1].bias.len())],
            readout: Array1::zeros(self.readout.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeParams {
    pub config: EdgeConfig,
    pub weights: EdgeWeights,
    /// k x d Gaussian frequency matrix, drawn once and never trained.
    pub fourier: Array2<f64>,
}

impl EdgeParams {
    pub fn init<R: Rng>(config: &EdgeConfig, layers: usize, width: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (dd, d, k) = (config.embed_dim, config.pos_dim, config.fourier_k);
        let mut uniform = |shape: (usize, usize), fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
        };
        let phi = (0..layers).map(|_| uniform((width, dd), width)).collect();
        let omega = (0..layers).map(|_| uniform((width, dd), width)).collect();
        let mut affine = || Affine {
            weight: uniform((3, d), 3),
            bias: uniform((1, d), 3).index_axis_move(Axis(0), 0),
        };
        let theta = [affine(), affine()];
        let readout = uniform((1, 2 * k), 2 * k).index_axis_move(Axis(0), 0);
        let normal = Normal::new(0.0, config.sigma).map_err(|e| Error::Config(e.to_string()))?;
        let fourier = Array2::from_shape_simple_fn((k, d), || normal.sample(rng));
        Ok(EdgeParams { config: config.clone(), weights: EdgeWeights { phi, omega, theta, readout }, fourier })
    }

    pub fn embed(&self, p: Point3, vulnerable: bool) -> Array1<f64> {
        self.weights.theta[vulnerable as usize].apply(p)
    }
}

/// `[cos(2 pi B v); sin(2 pi B v)]`.
pub fn fourier_map(v: ArrayView1<f64>, b: &Array2<f64>) -> Result<Array1<f64>> {
    if b.ncols() != v.len() {
        return Err(Error::Shape(format!("Fourier matrix has {} columns, input has length {}", b.ncols(), v.len())));
    }
    let k = b.nrows();
    let u = b.dot(&v) * (2.0 * PI);
    let mut out = Array1::zeros(2 * k);
    for (r, ur) in u.iter().enumerate() {
        out[r] = ur.cos();
        out[k + r] = ur.sin();
    }
    Ok(out)
}

/// Positional relation pre-activation `W_p . gamma(theta_mi(p_i) + theta_mj(p_j))`.
fn positional_preactivation(ei: ArrayView1<f64>, ej: ArrayView1<f64>, params: &EdgeParams) -> f64 {
    let v = &ei + &ej;
    let g = fourier_map(v.view(), &params.fourier).expect("embedding width matches the Fourier matrix");
    params.weights.readout.dot(&g)
}

pub fn positional_relation(pi: Point3, mi: bool, pj: Point3, mj: bool, params: &EdgeParams) -> f64 {
    let (ei, ej) = (params.embed(pi, mi), params.embed(pj, mj));
    positional_preactivation(ei.view(), ej.view(), params).max(0.0)
}

/// `(phi a_i) . (omega a_j) / sqrt(D)`.
pub fn appearance_relation(
    ai: ArrayView1<f64>,
    aj: ArrayView1<f64>,
    phi: &Array2<f64>,
    omega: &Array2<f64>,
) -> Result<f64> {
    if phi.raw_dim() != omega.raw_dim() || phi.nrows() != ai.len() || omega.nrows() != aj.len() {
        return Err(Error::Shape(format!(
            "features of length {}/{} against projections {:?}/{:?}",
            ai.len(),
            aj.len(),
            phi.shape(),
            omega.shape()
        )));
    }
    let scale = (phi.ncols() as f64).sqrt();
    Ok(ai.dot(phi).dot(&aj.dot(omega)) / scale)
}

/// The graph nodes of a scenario: ego at slot 0 followed by the agents in
/// scenario order, with context-fused appearance features.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    pub gamma: usize,
    pub agent_ids: Vec<AgentId>,
    /// Per node; the ego is non-vulnerable.
    pub vulnerable: Vec<bool>,
    /// gamma x nodes
    pub present: Array2<bool>,
    /// gamma x nodes; absent slots hold the origin.
    pub positions: Vec<Vec<Point3>>,
    /// gamma x nodes x F; absent slots are zero.
    pub features: Array3<f64>,
}

impl NodeSet {
    pub fn from_scenario(s: &Scenario) -> Result<Self> {
        let (gamma, f) = (s.gamma, s.feature_dim());
        let n = s.agents.len() + 1;
        let mut present = Array2::from_elem((gamma, n), false);
        let mut positions = vec![vec![Point3::ORIGIN; n]; gamma];
        let mut features = Array3::zeros((gamma, n, f));
        let mut vulnerable = vec![false; n];
        for t in 0..gamma {
            present[[t, EGO]] = true;
            let ego = fuse_context(&s.ego_feature, &s.context[t])?;
            features.slice_mut(s![t, EGO, ..]).assign(&Array1::from(ego));
        }
        for (ai, agent) in s.agents.iter().enumerate() {
            let node = ai + 1;
            vulnerable[node] = agent.tracklet.vulnerable();
            for st in &agent.states {
                if st.t >= gamma {
                    return Err(Error::Shape(format!("agent {} state at frame {} beyond gamma", agent.id(), st.t)));
                }
                present[[st.t, node]] = true;
                positions[st.t][node] = st.position;
                let fused = fuse_context(&st.appearance, &s.context[st.t])?;
                features.slice_mut(s![st.t, node, ..]).assign(&Array1::from(fused));
            }
        }
        Ok(NodeSet { gamma, agent_ids: s.agent_ids(), vulnerable, present, positions, features })
    }

    pub fn len(&self) -> usize {
        self.vulnerable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vulnerable.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim().2
    }

    /// Pairs that may interact: both present and within `mu` (self pairs always qualify).
    pub fn gate(&self, mu: f64) -> Array3<bool> {
        let n = self.len();
        Array3::from_shape_fn((self.gamma, n, n), |(t, i, j)| {
            self.present[[t, i]]
                && self.present[[t, j]]
                && euclidean_distance(self.positions[t][i], self.positions[t][j]) <= mu
        })
    }
}

/// Positional relations of every gated pair: `(f_p, pre-activation)`, each gamma x n x n.
pub fn positional_relations(nodes: &NodeSet, gate: &Array3<bool>, params: &EdgeParams) -> (Array3<f64>, Array3<f64>) {
    let n = nodes.len();
    let mut pre = Array3::zeros((nodes.gamma, n, n));
    for t in 0..nodes.gamma {
        let emb: Vec<Array1<f64>> =
            (0..n).map(|i| params.embed(nodes.positions[t][i], nodes.vulnerable[i])).collect();
        for i in 0..n {
            for j in 0..n {
                if gate[[t, i, j]] {
                    pre[[t, i, j]] = positional_preactivation(emb[i].view(), emb[j].view(), params);
                }
            }
        }
    }
    let fp = pre.mapv(|v: f64| v.max(0.0));
    (fp, pre)
}

/// Gradients of the positional parameters given `dL/df_p` for every pair.
pub fn positional_relations_backward(
    nodes: &NodeSet,
    gate: &Array3<bool>,
    params: &EdgeParams,
    pre: &Array3<f64>,
    dfp: &Array3<f64>,
    grad: &mut EdgeWeights,
) {
    let n = nodes.len();
    let k = params.config.fourier_k;
    let b = &params.fourier;
    for t in 0..nodes.gamma {
        let emb: Vec<Array1<f64>> =
            (0..n).map(|i| params.embed(nodes.positions[t][i], nodes.vulnerable[i])).collect();
        for i in 0..n {
            for j in 0..n {
                if !gate[[t, i, j]] || pre[[t, i, j]] <= 0.0 {
                    continue;
                }
                let dpre = dfp[[t, i, j]];
                if dpre == 0.0 {
                    continue;
                }
                let v = &emb[i] + &emb[j];
                let u = b.dot(&v) * (2.0 * PI);
                let mut du = Array1::zeros(k);
                for r in 0..k {
                    let (sr, cr) = u[r].sin_cos();
                    grad.readout[r] += dpre * cr;
                    grad.readout[k + r] += dpre * sr;
                    du[r] = dpre * (-sr * params.weights.readout[r] + cr * params.weights.readout[k + r]);
                }
                let dv = b.t().dot(&du) * (2.0 * PI);
                for node in [i, j] {
                    let th = &mut grad.theta[nodes.vulnerable[node] as usize];
                    let p = nodes.positions[t][node].to_array();
                    for (a, pa) in p.iter().enumerate() {
                        th.weight.row_mut(a).scaled_add(*pa, &dv);
                    }
                    th.bias += &dv;
                }
            }
        }
    }
}

/// A normalized frame plus what its backward pass needs.
#[derive(Debug, Clone)]
pub struct FrameInteractions {
    pub g: Array2<f64>,
    /// `exp(f_a - rowmax) / rowsum` on valid entries of non-fallback rows, so `g = f_p * softw`.
    pub softw: Array2<f64>,
    pub fallback: Vec<bool>,
}

/// Row-normalizes `gate * f_p * exp(f_a)`; rows of absent nodes stay zero.
pub fn normalize_interactions(
    fp: ArrayView2<f64>,
    fa: ArrayView2<f64>,
    valid: ArrayView2<bool>,
    present: &[bool],
) -> FrameInteractions {
    let n = present.len();
    let mut g = Array2::zeros((n, n));
    let mut softw = Array2::zeros((n, n));
    let mut fallback = vec![false; n];
    for i in 0..n {
        if !present[i] {
            continue;
        }
        let max = (0..n).filter(|&j| valid[[i, j]]).map(|j| fa[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in (0..n).filter(|&j| valid[[i, j]]) {
            let e = (fa[[i, j]] - max).exp();
            softw[[i, j]] = e;
            total += fp[[i, j]] * e;
        }
        if total > 0.0 {
            for j in 0..n {
                softw[[i, j]] /= total;
                g[[i, j]] = fp[[i, j]] * softw[[i, j]];
            }
        } else {
            fallback[i] = true;
            softw.row_mut(i).fill(0.0);
            g[[i, i]] = 1.0;
        }
    }
    FrameInteractions { g, softw, fallback }
}

/// Appearance relations of all node pairs at one frame, with the two projections.
pub fn appearance_relations(
    x: ArrayView2<f64>,
    phi: &Array2<f64>,
    omega: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = (phi.ncols() as f64).sqrt();
    let p = x.dot(phi);
    let q = x.dot(omega);
    let fa = p.dot(&q.t()) / scale;
    (fa, p, q)
}

/// Backward through one normalized frame. Returns `(dL/dX_t, dL/df_p)` and
/// accumulates the projection gradients into `dphi`/`domega`.
#[allow(clippy::too_many_arguments)]
pub fn interactions_backward(
    frame: &FrameInteractions,
    x: ArrayView2<f64>,
    p: &Array2<f64>,
    q: &Array2<f64>,
    phi: &Array2<f64>,
    omega: &Array2<f64>,
    dg: ArrayView2<f64>,
    dphi: &mut Array2<f64>,
    domega: &mut Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let n = frame.g.nrows();
    let scale = (phi.ncols() as f64).sqrt();
    let mut ds = Array2::zeros((n, n));
    let mut dfp = Array2::zeros((n, n));
    for i in 0..n {
        if frame.fallback[i] {
            continue;
        }
        let r: f64 = (0..n).map(|k| frame.g[[i, k]] * dg[[i, k]]).sum();
        for j in 0..n {
            let w = frame.softw[[i, j]];
            if w == 0.0 {
                continue;
            }
            let centered = dg[[i, j]] - r;
            ds[[i, j]] = frame.g[[i, j]] * centered / scale;
            dfp[[i, j]] = w * centered;
        }
    }
    let dp = ds.dot(q);
    let dq = ds.t().dot(p);
    *dphi += &x.t().dot(&dp);
    *domega += &x.t().dot(&dq);
    let dx = dp.dot(&phi.t()) + dq.dot(&omega.t());
    (dx, dfp)
}

/// Directed adjacency of one frame computed from layer features `x` (n x C).
pub fn build_adjacency_frame(
    nodes: &NodeSet,
    t: usize,
    x: ArrayView2<f64>,
    params: &EdgeParams,
    layer: usize,
) -> Result<Array2<f64>> {
    let present: Vec<bool> = nodes.present.row(t).to_vec();
    if !present.iter().any(|&p| p) {
        return Err(Error::EmptyFrame(t));
    }
    let w = &params.weights;
    if layer >= w.phi.len() {
        return Err(Error::Shape(format!("layer {layer} out of range ({} layers)", w.phi.len())));
    }
    if x.dim() != (nodes.len(), w.phi[layer].nrows()) {
        return Err(Error::Shape(format!("features {:?} for {} nodes", x.shape(), nodes.len())));
    }
    let gate = nodes.gate(params.config.mu);
    let gate_t = gate.index_axis(Axis(0), t);
    let n = nodes.len();
    let mut fp = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if gate_t[[i, j]] {
                fp[[i, j]] = positional_relation(
                    nodes.positions[t][i],
                    nodes.vulnerable[i],
                    nodes.positions[t][j],
                    nodes.vulnerable[j],
                    params,
                );
            }
        }
    }
    let (fa, _, _) = appearance_relations(x, &w.phi[layer], &w.omega[layer]);
    Ok(normalize_interactions(fp.view(), fa.view(), gate_t, &present).g)
}

/// Stacked per-frame adjacency with the tracklet validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyTensor {
    /// gamma x nodes x nodes
    pub g: Array3<f64>,
    /// gamma x nodes
    pub valid: Array2<bool>,
    pub agent_ids: Vec<AgentId>,
}

impl AdjacencyTensor {
    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        self.g.outer_iter().map(|m| m.outer_iter().map(|r| r.to_vec()).collect()).collect()
    }
}

/// Builds every frame from per-layer features `x` (gamma x nodes x C).
pub fn build_adjacency(
    nodes: &NodeSet,
    x: ndarray::ArrayView3<f64>,
    params: &EdgeParams,
    layer: usize,
) -> Result<AdjacencyTensor> {
    let n = nodes.len();
    let mut g = Array3::zeros((nodes.gamma, n, n));
    for t in 0..nodes.gamma {
        let frame = build_adjacency_frame(nodes, t, x.index_axis(Axis(0), t), params, layer)?;
        g.index_axis_mut(Axis(0), t).assign(&frame);
    }
    Ok(AdjacencyTensor { g, valid: nodes.present.clone(), agent_ids: nodes.agent_ids.clone() })
}

/// Mean ego-to-agent weight over each agent's present frames, in agent order.
pub fn ego_interaction_profile(adj: &AdjacencyTensor) -> Vec<(AgentId, f64)> {
    adj.agent_ids
        .iter()
        .enumerate()
        .map(|(ai, &id)| {
            let node = ai + 1;
            let frames: Vec<usize> = (0..adj.valid.nrows()).filter(|&t| adj.valid[[t, node]]).collect();
            let mean = if frames.is_empty() {
                0.0
            } else {
                frames.iter().map(|&t| adj.g[[t, EGO, node]]).sum::<f64>() / frames.len() as f64
            };
            (id, mean)
        })
        .collect()
}

//! Batched forward and reverse-mode passes.
//!
//! Each layer runs: adjacency from the current features, spatial graph
//! convolution, normalization, ReLU, vulnerability-split temporal
//! convolution, normalization, residual add, ReLU. Scenario-local work fans
//! out over the batch; the only cross-scenario coupling is the per-channel
//! batch statistics, which are reduced in batch order so results do not
//! depend on the thread count.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};

use super::params::{Gradients, LayerWeights, ModelConfig, ModelParams, NormAffine, NormMode};
use crate::error::{Error, Result};
use crate::graph::{
    appearance_relations, interactions_backward, normalize_interactions, positional_relations,
    positional_relations_backward, FrameInteractions, NodeSet,
};
use crate::par;
use crate::scenario::Scenario;

/// Probability floor inside the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics.
    Train,
    /// Running statistics; deterministic per scenario.
    Eval,
}

/// A scenario turned into graph nodes plus the static distance gate.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub nodes: NodeSet,
    /// gamma x n x n
    pub gate: Array3<bool>,
    /// gamma x n, 1.0 where the node-frame is valid
    pub mask: Array2<f64>,
    pub count: usize,
}

impl Prepared {
    pub fn new(s: &Scenario, config: &ModelConfig) -> Result<Self> {
        if s.feature_dim() != config.feature_dim {
            return Err(Error::Shape(format!(
                "scenario feature width {} but model expects {}",
                s.feature_dim(),
                config.feature_dim
            )));
        }
        if s.gamma < 1 {
            return Err(Error::Shape("scenario has no frames".into()));
        }
        let nodes = NodeSet::from_scenario(s)?;
        let gate = nodes.gate(config.edge.mu);
        let mask = nodes.present.mapv(|p| if p { 1.0 } else { 0.0 });
        let count = nodes.present.iter().filter(|p| **p).count();
        Ok(Prepared { nodes, gate, mask, count })
    }

    pub fn gamma(&self) -> usize {
        self.nodes.gamma
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Per-channel statistics used by one normalization site.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Array1<f64>,
    pub inv_std: Array1<f64>,
    /// Unbiased variance, for the running average (train mode only).
    pub unbiased_var: Array1<f64>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub x_in: Array3<f64>,
    pub frames: Vec<FrameInteractions>,
    proj_p: Vec<Array2<f64>>,
    proj_q: Vec<Array2<f64>>,
    /// G X
    agg: Array3<f64>,
    z_spatial: Array3<f64>,
    hat_spatial: Array3<f64>,
    pre_spatial: Array3<f64>,
    a: Array3<f64>,
    z_temporal: Array3<f64>,
    hat_temporal: Array3<f64>,
    pre_out: Array3<f64>,
    pub x_out: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub fp: Array3<f64>,
    fp_pre: Array3<f64>,
    pub layers: Vec<LayerTrace>,
    pooled: Array1<f64>,
    pub probs: Array1<f64>,
}

impl Trace {
    /// Sign pattern of every ReLU pre-activation on valid entries, plus the
    /// adjacency fallback flags. Finite differences are only meaningful for
    /// perturbations that leave this pattern unchanged.
    pub fn activation_pattern(&self, prep: &Prepared) -> Vec<bool> {
        let mut out = Vec::new();
        Zip::from(&self.fp_pre).and(&prep.gate).for_each(|&v, &g| {
            if g {
                out.push(v > 0.0)
            }
        });
        for layer in &self.layers {
            for f in &layer.frames {
                out.extend(&f.fallback);
            }
            for arr in [&layer.pre_spatial, &layer.pre_out] {
                for ((t, n, _), &v) in arr.indexed_iter() {
                    if prep.nodes.present[[t, n]] {
                        out.push(v > 0.0);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub mode: Mode,
    pub traces: Vec<Trace>,
    /// Per layer, spatial and temporal statistics actually used.
    pub stats: Vec<[NormStats; 2]>,
}

impl BatchForward {
    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.traces.iter().map(|t| t.probs.to_vec()).collect()
    }
}

fn masked(a: &mut Array3<f64>, mask: &Array2<f64>) {
    Zip::indexed(a).for_each(|(t, n, _), v| {
        if mask[[t, n]] == 0.0 {
            *v = 0.0
        }
    });
}

fn channel_sum(a: &Array3<f64>, mask: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(a.dim().2);
    for ((t, n), &m) in mask.indexed_iter() {
        if m != 0.0 {
            out += &a.slice(s![t, n, ..]);
        }
    }
    out
}

/// `X W^T` applied to the last axis, with `w` of shape out x in.
fn project_last(x: &Array3<f64>, w: &Array2<f64>) -> Array3<f64> {
    let (g, n, f) = x.dim();
    let flat = x.view().into_shape_with_order((g * n, f)).expect("contiguous");
    flat.dot(&w.t()).into_shape_with_order((g, n, w.nrows())).expect("shape")
}

/// Right-multiplies every node-frame row by `w` (in x out).
fn right_mul(x: &Array3<f64>, w: &Array2<f64>) -> Array3<f64> {
    let (g, n, c) = x.dim();
    let flat = x.view().into_shape_with_order((g * n, c)).expect("contiguous");
    flat.dot(w).into_shape_with_order((g, n, w.ncols())).expect("shape")
}

/// Temporal mixing without residual or activation:
/// `Z_t[n] = sum_o A_{t+o}[n] W[o][m_n]`, zero padded in time.
pub fn temporal_mix(a: ArrayView3<f64>, layer: &LayerWeights, vulnerable: &[bool], tau: usize) -> Array3<f64> {
    let (gamma, n, c) = a.dim();
    let half = (tau / 2) as isize;
    let mut z = Array3::zeros((gamma, n, c));
    for node in 0..n {
        let series = a.slice(s![.., node, ..]);
        for oi in 0..tau {
            let offset = oi as isize - half;
            let prod = series.dot(layer.kernel(oi, vulnerable[node]));
            let lo = (-offset).max(0) as usize;
            let hi = (gamma as isize - offset).min(gamma as isize).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let src = prod.slice(s![(lo as isize + offset) as usize..(hi as isize + offset) as usize, ..]);
            let mut dst = z.slice_mut(s![lo..hi, node, ..]);
            dst += &src;
        }
    }
    z
}

fn temporal_mix_backward(
    a: &Array3<f64>,
    dz: &Array3<f64>,
    layer: &LayerWeights,
    grad: &mut LayerWeights,
    vulnerable: &[bool],
    tau: usize,
) -> Array3<f64> {
    let (gamma, n, c) = a.dim();
    let half = (tau / 2) as isize;
    let mut da = Array3::zeros((gamma, n, c));
    for node in 0..n {
        let m = vulnerable[node] as usize;
        let series = a.slice(s![.., node, ..]);
        let dseries = dz.slice(s![.., node, ..]);
        for oi in 0..tau {
            let offset = oi as isize - half;
            let lo = (-offset).max(0) as usize;
            let hi = (gamma as isize - offset).min(gamma as isize).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let src_range = (lo as isize + offset) as usize..(hi as isize + offset) as usize;
            let d = dseries.slice(s![lo..hi, ..]);
            let src = series.slice(s![src_range.clone(), ..]);
            grad.temporal[oi * 2 + m] += &src.t().dot(&d);
            let back = d.dot(&layer.kernel(oi, vulnerable[node]).t());
            let mut dst = da.slice_mut(s![src_range, node, ..]);
            dst += &back;
        }
    }
    da
}

/// One normalization site: returns `(normalized, scaled+shifted)`, masked.
fn norm_apply(z: &Array3<f64>, stats: &NormStats, affine: &NormAffine, mode: NormMode, mask: &Array2<f64>) -> (Array3<f64>, Array3<f64>) {
    if mode == NormMode::None {
        return (z.clone(), z.clone());
    }
    let mut hat = z.clone();
    for mut row in hat.lanes_mut(Axis(2)) {
        row -= &stats.mean;
        row *= &stats.inv_std;
    }
    masked(&mut hat, mask);
    let mut out = hat.clone();
    for mut row in out.lanes_mut(Axis(2)) {
        row *= &affine.scale;
        row += &affine.shift;
    }
    masked(&mut out, mask);
    (hat, out)
}

fn batch_stats(zs: &[&Array3<f64>], masks: &[&Array2<f64>], eps: f64) -> NormStats {
    let c = zs[0].dim().2;
    let pairs: Vec<(&Array3<f64>, &Array2<f64>)> = zs.iter().copied().zip(masks.iter().copied()).collect();
    let count: usize = masks.iter().map(|m| m.iter().filter(|v| **v != 0.0).count()).sum();
    let sums = par::map(&pairs, |(z, m)| channel_sum(z, m));
    let mut mean = Array1::zeros(c);
    for s in &sums {
        mean += s;
    }
    mean /= count as f64;
    let sq = par::map(&pairs, |(z, m)| {
        let mut d = (*z).clone();
        for mut row in d.lanes_mut(Axis(2)) {
            row -= &mean;
        }
        d.mapv_inplace(|v| v * v);
        channel_sum(&d, m)
    });
    let mut var = Array1::zeros(c);
    for s in &sq {
        var += s;
    }
    var /= count as f64;
    let inv_std = var.mapv(|v: f64| 1.0 / (v + eps).sqrt());
    let unbiased_var = if count > 1 { &var * (count as f64 / (count as f64 - 1.0)) } else { var.clone() };
    NormStats { mean, inv_std, unbiased_var, count }
}

fn running_stats(params: &ModelParams, layer: usize, slot: usize) -> NormStats {
    let r = &params.running[layer][slot];
    NormStats {
        mean: r.mean.clone(),
        inv_std: r.var.mapv(|v| 1.0 / (v + params.config.norm_eps).sqrt()),
        unbiased_var: r.var.clone(),
        count: 0,
    }
}

fn identity_stats(c: usize) -> NormStats {
    NormStats { mean: Array1::zeros(c), inv_std: Array1::ones(c), unbiased_var: Array1::ones(c), count: 0 }
}

fn site_stats(params: &ModelParams, mode: Mode, layer: usize, slot: usize, zs: &[&Array3<f64>], masks: &[&Array2<f64>]) -> NormStats {
    match (params.config.norm, mode) {
        (NormMode::None, _) => identity_stats(params.config.width),
        (NormMode::Batch, Mode::Eval) => running_stats(params, layer, slot),
        (NormMode::Batch, Mode::Train) => batch_stats(zs, masks, params.config.norm_eps),
    }
}

struct Work<'a> {
    prep: &'a Prepared,
    trace: Trace,
    /// Features entering the current layer.
    x: Array3<f64>,
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - max).exp());
    let total = e.sum();
    e / total
}

fn check_finite(a: &Array3<f64>, what: &str, layer: usize) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} of layer {layer}")))
    }
}

pub fn forward_batch(params: &ModelParams, batch: &[&Prepared], mode: Mode) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let cfg = &params.config;
    for p in batch {
        if p.nodes.feature_dim() != cfg.feature_dim {
            return Err(Error::Shape(format!("features of width {} for a model expecting {}", p.nodes.feature_dim(), cfg.feature_dim)));
        }
        if p.gamma() < 1 || p.count == 0 {
            return Err(Error::Shape("scenario without valid node-frames".into()));
        }
    }
    let edges = &params.edges;
    let mut works: Vec<Work> = par::map(batch, |prep| {
        let (fp, fp_pre) = positional_relations(&prep.nodes, &prep.gate, edges);
        let mut x = project_last(&prep.nodes.features, &params.net.input);
        masked(&mut x, &prep.mask);
        Work {
            prep,
            trace: Trace { fp, fp_pre, layers: Vec::new(), pooled: Array1::zeros(0), probs: Array1::zeros(0) },
            x,
        }
    });

    let mut all_stats = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let lw = &params.net.layers[l];
        let (phi, omega) = (&edges.weights.phi[l], &edges.weights.omega[l]);

        // adjacency and spatial aggregation
        par::try_for_each_mut(&mut works, |w| {
            let prep = w.prep;
            let (gamma, n, c) = w.x.dim();
            let mut frames = Vec::with_capacity(gamma);
            let (mut ps, mut qs) = (Vec::with_capacity(gamma), Vec::with_capacity(gamma));
            let mut agg = Array3::zeros((gamma, n, c));
            for t in 0..gamma {
                let xt = w.x.index_axis(Axis(0), t);
                let (fa, p, q) = appearance_relations(xt, phi, omega);
                let present: Vec<bool> = prep.nodes.present.row(t).to_vec();
                let frame = normalize_interactions(
                    w.trace.fp.index_axis(Axis(0), t),
                    fa.view(),
                    prep.gate.index_axis(Axis(0), t),
                    &present,
                );
                agg.index_axis_mut(Axis(0), t).assign(&frame.g.dot(&xt));
                frames.push(frame);
                ps.push(p);
                qs.push(q);
            }
            let z_spatial = right_mul(&agg, &lw.spatial);
            check_finite(&z_spatial, "spatial convolution", l)?;
            w.trace.layers.push(LayerTrace {
                x_in: w.x.clone(),
                frames,
                proj_p: ps,
                proj_q: qs,
                agg,
                z_spatial,
                hat_spatial: Array3::zeros((0, 0, 0)),
                pre_spatial: Array3::zeros((0, 0, 0)),
                a: Array3::zeros((0, 0, 0)),
                z_temporal: Array3::zeros((0, 0, 0)),
                hat_temporal: Array3::zeros((0, 0, 0)),
                pre_out: Array3::zeros((0, 0, 0)),
                x_out: Array3::zeros((0, 0, 0)),
            });
            Ok(())
        })?;

        let spatial_stats = {
            let zs: Vec<&Array3<f64>> = works.iter().map(|w| &w.trace.layers[l].z_spatial).collect();
            let ms: Vec<&Array2<f64>> = works.iter().map(|w| &w.prep.mask).collect();
            site_stats(params, mode, l, 0, &zs, &ms)
        };

        par::try_for_each_mut(&mut works, |w| {
            let prep = w.prep;
            let lt = w.trace.layers.last_mut().expect("layer pushed");
            let (hat, pre) = norm_apply(&lt.z_spatial, &spatial_stats, &lw.norm_spatial, cfg.norm, &prep.mask);
            let a = pre.mapv(|v| v.max(0.0));
            let z_temporal = temporal_mix(a.view(), lw, &prep.nodes.vulnerable, cfg.tau);
            check_finite(&z_temporal, "temporal convolution", l)?;
            lt.hat_spatial = hat;
            lt.pre_spatial = pre;
            lt.a = a;
            lt.z_temporal = z_temporal;
            Ok(())
        })?;

        let temporal_stats = {
            let zs: Vec<&Array3<f64>> = works.iter().map(|w| &w.trace.layers[l].z_temporal).collect();
            let ms: Vec<&Array2<f64>> = works.iter().map(|w| &w.prep.mask).collect();
            site_stats(params, mode, l, 1, &zs, &ms)
        };

        par::for_each_mut(&mut works, |w| {
            let prep = w.prep;
            let lt = w.trace.layers.last_mut().expect("layer pushed");
            let (hat, mut pre) = norm_apply(&lt.z_temporal, &temporal_stats, &lw.norm_temporal, cfg.norm, &prep.mask);
            pre += &lt.x_in;
            masked(&mut pre, &prep.mask);
            let out = pre.mapv(|v| v.max(0.0));
            lt.hat_temporal = hat;
            lt.pre_out = pre;
            lt.x_out = out.clone();
            w.x = out;
        });
        all_stats.push([spatial_stats, temporal_stats]);
    }

    par::for_each_mut(&mut works, |w| {
        let pooled = channel_sum(&w.x, &w.prep.mask) / w.prep.count as f64;
        let logits = params.net.head_weight.dot(&pooled) + &params.net.head_bias;
        w.trace.probs = softmax(&logits);
        w.trace.pooled = pooled;
    });
    for w in &works {
        if !w.trace.probs.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("classifier output".into()));
        }
    }

    Ok(BatchForward { mode, traces: works.into_iter().map(|w| w.trace).collect(), stats: all_stats })
}

/// Cross-entropy with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| Error::Label(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

struct BackWork<'a> {
    prep: &'a Prepared,
    trace: &'a Trace,
    grads: Gradients,
    dx: Array3<f64>,
    dfp: Array3<f64>,
    /// per-site scratch: gradient w.r.t. the normalized activations
    dhat: Array3<f64>,
}

fn norm_partials(dhat: &Array3<f64>, hat: &Array3<f64>, mask: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    (channel_sum(dhat, mask), channel_sum(&(dhat * hat), mask))
}

/// Gradient through a normalization site given `dL/d(out)`; accumulates the
/// affine gradients and stores `dL/d(hat)` into the work item.
fn norm_affine_backward(dout: &Array3<f64>, hat: &Array3<f64>, affine: &NormAffine, grad: &mut NormAffine, mask: &Array2<f64>) -> Array3<f64> {
    grad.shift += &channel_sum(dout, mask);
    grad.scale += &channel_sum(&(dout * hat), mask);
    let mut dhat = dout.clone();
    for mut row in dhat.lanes_mut(Axis(2)) {
        row *= &affine.scale;
    }
    masked(&mut dhat, mask);
    dhat
}

fn norm_input_grad(dhat: &Array3<f64>, hat: &Array3<f64>, stats: &NormStats, sums: &(Array1<f64>, Array1<f64>), mode: Mode, mask: &Array2<f64>) -> Array3<f64> {
    let mut dz = dhat.clone();
    match mode {
        Mode::Eval => {
            for mut row in dz.lanes_mut(Axis(2)) {
                row *= &stats.inv_std;
            }
        }
        Mode::Train => {
            let nf = stats.count as f64;
            Zip::from(dz.lanes_mut(Axis(2))).and(hat.lanes(Axis(2))).for_each(|mut d, h| {
                for c in 0..d.len() {
                    d[c] = stats.inv_std[c] / nf * (nf * d[c] - sums.0[c] - h[c] * sums.1[c]);
                }
            });
        }
    }
    masked(&mut dz, mask);
    dz
}

fn reduce_partials(parts: Vec<(Array1<f64>, Array1<f64>)>) -> (Array1<f64>, Array1<f64>) {
    let mut it = parts.into_iter();
    let first = it.next().expect("non-empty batch");
    it.fold(first, |(a, b), (c, d)| (a + c, b + d))
}

/// Reverse pass of the mean cross-entropy over the batch. Returns the loss and
/// gradients for every trainable tensor.
pub fn backward_batch(params: &ModelParams, batch: &[&Prepared], fwd: &BatchForward, labels: &[usize]) -> Result<(f64, Gradients)> {
    if labels.len() != batch.len() || fwd.traces.len() != batch.len() {
        return Err(Error::Shape("batch, labels and forward traces differ in length".into()));
    }
    let cfg = &params.config;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (tr, &y) in fwd.traces.iter().zip(labels) {
        loss += cross_entropy(tr.probs.as_slice().expect("contiguous"), y)?;
    }
    loss *= scale;
    let use_norm = cfg.norm == NormMode::Batch;

    let items: Vec<(&Prepared, &Trace, usize)> =
        batch.iter().zip(&fwd.traces).zip(labels).map(|((p, t), &y)| (*p, t, y)).collect();
    let mut works: Vec<BackWork> = par::map(&items, |&(prep, trace, label)| {
        let mut grads = Gradients::zeros_like(params);
        let mut dlogits = trace.probs.clone();
        if trace.probs[label] >= PROB_FLOOR {
            dlogits[label] -= 1.0;
        } else {
            dlogits.fill(0.0);
        }
        dlogits *= scale;
        grads.net.head_bias += &dlogits;
        for k in 0..dlogits.len() {
            grads.net.head_weight.row_mut(k).scaled_add(dlogits[k], &trace.pooled);
        }
        let dpooled = params.net.head_weight.t().dot(&dlogits) / prep.count as f64;
        let (gamma, n) = prep.mask.dim();
        let mut dx = Array3::zeros((gamma, n, cfg.width));
        for ((t, node), &m) in prep.mask.indexed_iter() {
            if m != 0.0 {
                dx.slice_mut(s![t, node, ..]).assign(&dpooled);
            }
        }
        BackWork { prep, trace, grads, dx, dfp: Array3::zeros((gamma, n, n)), dhat: Array3::zeros((0, 0, 0)) }
    });

    for l in (0..cfg.layers).rev() {
        let lw = &params.net.layers[l];
        let [spatial_stats, temporal_stats] = &fwd.stats[l];
        let (phi, omega) = (&params.edges.weights.phi[l], &params.edges.weights.omega[l]);

        // output ReLU, residual, temporal normalization affine
        let parts = par::map_mut_collect(&mut works, |w| {
            let lt = &w.trace.layers[l];
            let mut du = w.dx.clone();
            Zip::from(&mut du).and(&lt.pre_out).for_each(|d, &u| {
                if u <= 0.0 {
                    *d = 0.0
                }
            });
            masked(&mut du, &w.prep.mask);
            w.dx = du.clone();
            if use_norm {
                w.dhat = norm_affine_backward(&du, &lt.hat_temporal, &lw.norm_temporal, &mut w.grads.net.layers[l].norm_temporal, &w.prep.mask);
                norm_partials(&w.dhat, &lt.hat_temporal, &w.prep.mask)
            } else {
                w.dhat = du;
                (Array1::zeros(0), Array1::zeros(0))
            }
        });
        let sums = if use_norm { reduce_partials(parts) } else { (Array1::zeros(0), Array1::zeros(0)) };

        // temporal convolution, spatial ReLU, spatial normalization affine
        let parts = par::map_mut_collect(&mut works, |w| {
            let lt = &w.trace.layers[l];
            let dz = if use_norm {
                norm_input_grad(&w.dhat, &lt.hat_temporal, temporal_stats, &sums, fwd.mode, &w.prep.mask)
            } else {
                w.dhat.clone()
            };
            let mut da = temporal_mix_backward(&lt.a, &dz, lw, &mut w.grads.net.layers[l], &w.prep.nodes.vulnerable, cfg.tau);
            Zip::from(&mut da).and(&lt.pre_spatial).for_each(|d, &v| {
                if v <= 0.0 {
                    *d = 0.0
                }
            });
            masked(&mut da, &w.prep.mask);
            if use_norm {
                w.dhat = norm_affine_backward(&da, &lt.hat_spatial, &lw.norm_spatial, &mut w.grads.net.layers[l].norm_spatial, &w.prep.mask);
                norm_partials(&w.dhat, &lt.hat_spatial, &w.prep.mask)
            } else {
                w.dhat = da;
                (Array1::zeros(0), Array1::zeros(0))
            }
        });
        let sums = if use_norm { reduce_partials(parts) } else { (Array1::zeros(0), Array1::zeros(0)) };

        // spatial convolution and adjacency
        par::for_each_mut(&mut works, |w| {
            let lt = &w.trace.layers[l];
            let dz = if use_norm {
                norm_input_grad(&w.dhat, &lt.hat_spatial, spatial_stats, &sums, fwd.mode, &w.prep.mask)
            } else {
                w.dhat.clone()
            };
            let (gamma, n, c) = dz.dim();
            let flat_agg = lt.agg.view().into_shape_with_order((gamma * n, c)).expect("contiguous");
            let flat_dz = dz.view().into_shape_with_order((gamma * n, c)).expect("contiguous");
            w.grads.net.layers[l].spatial += &flat_agg.t().dot(&flat_dz);
            let dagg = right_mul(&dz, &lw.spatial.t().to_owned());
            let gl = &mut w.grads.edges;
            for t in 0..gamma {
                let xt = lt.x_in.index_axis(Axis(0), t);
                let frame = &lt.frames[t];
                let dagg_t = dagg.index_axis(Axis(0), t);
                let dg = dagg_t.dot(&xt.t());
                let mut dxt = frame.g.t().dot(&dagg_t);
                let (dx_adj, dfp) = interactions_backward(
                    frame,
                    xt,
                    &lt.proj_p[t],
                    &lt.proj_q[t],
                    phi,
                    omega,
                    dg.view(),
                    &mut gl.phi[l],
                    &mut gl.omega[l],
                );
                dxt += &dx_adj;
                let mut dst = w.dx.index_axis_mut(Axis(0), t);
                dst += &dxt;
                let mut dfp_t = w.dfp.index_axis_mut(Axis(0), t);
                dfp_t += &dfp;
            }
            masked(&mut w.dx, &w.prep.mask);
        });
    }

    par::for_each_mut(&mut works, |w| {
        let (gamma, n, c) = w.dx.dim();
        let f = w.prep.nodes.feature_dim();
        let flat_dx = w.dx.view().into_shape_with_order((gamma * n, c)).expect("contiguous");
        let flat_x = w.prep.nodes.features.view().into_shape_with_order((gamma * n, f)).expect("contiguous");
        w.grads.net.input += &flat_dx.t().dot(&flat_x);
        positional_relations_backward(&w.prep.nodes, &w.prep.gate, &params.edges, &w.trace.fp_pre, &w.dfp, &mut w.grads.edges);
    });

    let mut iter = works.into_iter();
    let mut total = iter.next().expect("non-empty batch").grads;
    for w in iter {
        total.add_assign(&w.grads);
    }
    if !total.is_finite() {
        return Err(Error::Numeric("gradients".into()));
    }
    Ok((loss, total))
}

/// Public single-scenario helpers.
pub fn spatial_conv(g: ArrayView2<f64>, x: ArrayView2<f64>, w: &Array2<f64>) -> Result<Array2<f64>> {
    if g.nrows() != g.ncols() || g.ncols() != x.nrows() || x.ncols() != w.nrows() || w.nrows() != w.ncols() {
        return Err(Error::Shape(format!("G {:?}, X {:?}, W {:?}", g.shape(), x.shape(), w.shape())));
    }
    Ok(g.dot(&x).dot(w).mapv(|v| v.max(0.0)))
}

/// Temporal convolution with residual and ReLU, re-zeroing absent node-frames.
pub fn temporal_conv(
    xp: ArrayView3<f64>,
    layer: &LayerWeights,
    vulnerable: &[bool],
    residual: ArrayView3<f64>,
    present: &Array2<bool>,
    tau: usize,
) -> Result<Array3<f64>> {
    let (gamma, n, _) = xp.dim();
    if gamma < 1 {
        return Err(Error::Shape("temporal convolution needs at least one frame".into()));
    }
    if residual.dim() != xp.dim() || vulnerable.len() != n || present.dim() != (gamma, n) || layer.temporal.len() != 2 * tau {
        return Err(Error::Shape("temporal convolution inputs disagree".into()));
    }
    let mut out = temporal_mix(xp, layer, vulnerable, tau) + residual;
    out.mapv_inplace(|v| v.max(0.0));
    let mask = present.mapv(|p| if p { 1.0 } else { 0.0 });
    masked(&mut out, &mask);
    Ok(out)
}

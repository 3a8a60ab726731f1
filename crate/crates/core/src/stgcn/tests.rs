use approx::assert_abs_diff_eq;
use ndarray::{array, Array2, Array3};

use super::*;
use crate::graph::EdgeConfig;
use crate::scenario::{mask_agent, LABEL_GO, LABEL_STOP};

pub(crate) fn small_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        width: 8,
        edge: EdgeConfig { embed_dim: 8, ..EdgeConfig::default() },
        ..ModelConfig::default()
    }
}

fn layer_with(c: usize, tau: usize, center: Option<Array2<f64>>) -> LayerWeights {
    let mut temporal = vec![Array2::zeros((c, c)); 2 * tau];
    if let Some(k) = center {
        temporal[(tau / 2) * 2] = k.clone();
        temporal[(tau / 2) * 2 + 1] = k;
    }
    LayerWeights {
        spatial: Array2::eye(c),
        temporal,
        norm_spatial: NormAffine { scale: ndarray::Array1::ones(c), shift: ndarray::Array1::zeros(c) },
        norm_temporal: NormAffine { scale: ndarray::Array1::ones(c), shift: ndarray::Array1::zeros(c) },
    }
}

#[test]
fn spatial_conv_examples() {
    let x = array![[1.0, 2.0], [3.0, 0.5]];
    let out = spatial_conv(Array2::eye(2).view(), x.view(), &Array2::eye(2)).unwrap();
    assert_eq!(out, x);
    let g = array![[0.5, 0.5], [0.5, 0.5]];
    let same = array![[1.0, 2.0], [1.0, 2.0]];
    let out = spatial_conv(g.view(), same.view(), &Array2::eye(2)).unwrap();
    assert_eq!(out.row(0), out.row(1));
    let zero = spatial_conv(g.view(), Array2::zeros((2, 2)).view(), &Array2::eye(2)).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));
    assert!(matches!(spatial_conv(g.view(), x.view(), &Array2::eye(3)), Err(crate::Error::Shape(_))));
}

#[test]
fn temporal_conv_examples() {
    let (gamma, n, c, tau) = (3, 2, 2, 3);
    let present = Array2::from_elem((gamma, n), true);
    let residual = Array3::from_shape_fn((gamma, n, c), |(t, i, k)| t as f64 - i as f64 + k as f64 - 1.0);
    let xp = Array3::from_shape_fn((gamma, n, c), |(t, i, k)| (t + i + k) as f64);

    let zero_kernels = layer_with(c, tau, None);
    let out = temporal_conv(xp.view(), &zero_kernels, &[false, true], residual.view(), &present, tau).unwrap();
    assert_eq!(out, residual.mapv(|v| v.max(0.0)));

    let center = layer_with(c, tau, Some(Array2::eye(c)));
    let out = temporal_conv(xp.view(), &center, &[false, true], Array3::zeros((gamma, n, c)).view(), &present, tau)
        .unwrap();
    assert_eq!(out, xp);
}

#[test]
fn absent_node_does_not_leak_in_time() {
    let (gamma, n, c, tau) = (3, 2, 2, 3);
    let mut layer = layer_with(c, tau, None);
    for (i, k) in layer.temporal.iter_mut().enumerate() {
        *k = Array2::from_shape_fn((c, c), |(a, b)| 0.1 * (i + 1) as f64 + 0.05 * (a as f64 - b as f64));
    }
    let mut present = Array2::from_elem((gamma, n), true);
    present[[1, 0]] = false;
    let mut xp = Array3::from_shape_fn((gamma, n, c), |(t, i, k)| 1.0 + (t * 3 + i + k) as f64);
    xp.slice_mut(ndarray::s![1, 0, ..]).fill(0.0);
    let vul = [false, true];
    let out = temporal_conv(xp.view(), &layer, &vul, Array3::zeros((gamma, n, c)).view(), &present, tau).unwrap();
    for t in 0..gamma {
        for node in 0..n {
            let mut brute = ndarray::Array1::<f64>::zeros(c);
            for oi in 0..tau {
                let src = t as isize + oi as isize - 1;
                if src < 0 || src >= gamma as isize || !present[[src as usize, node]] {
                    continue;
                }
                brute += &xp.slice(ndarray::s![src as usize, node, ..]).dot(layer.kernel(oi, vul[node]));
            }
            let expect = if present[[t, node]] { brute.mapv(|v| v.max(0.0)) } else { ndarray::Array1::zeros(c) };
            for k in 0..c {
                assert_abs_diff_eq!(out[[t, node, k]], expect[k], epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn fresh_model_outputs_distribution() {
    let params = ModelParams::init(&small_config(), 3).unwrap();
    let s = reference_scenario(1, 4, 2, 8);
    for mode in [Mode::Eval, Mode::Train] {
        let p = forward(&s, &params, mode).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }
    assert_eq!(forward(&s, &params, Mode::Eval).unwrap(), forward(&s, &params, Mode::Eval).unwrap());
}

#[test]
fn feature_width_mismatch_is_shape_error() {
    let params = ModelParams::init(&small_config(), 3).unwrap();
    let s = reference_scenario(1, 4, 2, 5);
    assert!(matches!(forward(&s, &params, Mode::Eval), Err(crate::Error::Shape(_))));
}

#[test]
fn loss_examples() {
    let cfg = ModelConfig::default();
    assert!(loss(&[1.0, 0.0], LABEL_GO, &cfg).unwrap() <= 1e-12);
    assert_abs_diff_eq!(loss(&[0.5, 0.5], LABEL_STOP, &cfg).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
    assert!(matches!(loss(&[0.5, 0.5], "Yield", &cfg), Err(crate::Error::Label(_))));
    assert!(matches!(cross_entropy(&[0.5, 0.5], 2), Err(crate::Error::Label(_))));
    assert_abs_diff_eq!(cross_entropy(&[1.0, 0.0], 1).unwrap(), -(PROB_FLOOR.ln()), epsilon = 1e-9);
}

#[test]
fn absent_rows_stay_zero_through_layers() {
    let params = ModelParams::init(&small_config(), 5).unwrap();
    let s = reference_scenario(2, 5, 3, 8);
    let prep = Prepared::new(&s, &params.config).unwrap();
    let fwd = forward_batch(&params, &[&prep], Mode::Train).unwrap();
    for layer in &fwd.traces[0].layers {
        for ((t, n, _), &v) in layer.x_out.indexed_iter() {
            if !prep.nodes.present[[t, n]] {
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn head_gradient_matches_hand_formula() {
    // one node, one frame: only the ego
    let mut s = reference_scenario(4, 1, 0, 8);
    s.label = LABEL_STOP.into();
    let params = ModelParams::init(&ModelConfig { norm: NormMode::None, ..small_config() }, 1).unwrap();
    let prep = Prepared::new(&s, &params.config).unwrap();
    let fwd = forward_batch(&params, &[&prep], Mode::Train).unwrap();
    let (_, g) = backward(&s, &params, LABEL_STOP).unwrap();
    let trace = &fwd.traces[0];
    let pooled = trace.layers.last().unwrap().x_out.slice(ndarray::s![0, 0, ..]).to_owned();
    let mut residual = trace.probs.clone();
    residual[1] -= 1.0;
    for k in 0..2 {
        for c in 0..pooled.len() {
            assert_abs_diff_eq!(g.net.head_weight[[k, c]], residual[k] * pooled[c], epsilon = 1e-12);
        }
    }
}

#[test]
fn saturated_prediction_gives_zero_gradient() {
    let s = reference_scenario(4, 4, 2, 8);
    let mut params = ModelParams::init(&small_config(), 1).unwrap();
    let y = params.config.class_index(&s.label).unwrap();
    params.net.head_bias[y] = 1e6;
    let (l, g) = backward(&s, &params, &s.label).unwrap();
    assert_eq!(l, 0.0);
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn masking_matches_rebuilt_scenario() {
    let params = ModelParams::init(&small_config(), 9).unwrap();
    let s = reference_scenario(3, 4, 3, 8);
    let masked = mask_agent(&s, 11).unwrap();
    let mut rebuilt = s.clone();
    rebuilt.agents.retain(|a| a.id() != 11);
    assert_eq!(forward(&masked, &params, Mode::Eval).unwrap(), forward(&rebuilt, &params, Mode::Eval).unwrap());
}

#[test]
fn gradient_check_small_model() {
    let params = ModelParams::init(&small_config(), 11).unwrap();
    let batch = [reference_scenario(11, 4, 2, 8), reference_scenario(12, 4, 2, 8)];
    let report = grad_check(&params, &batch, &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{:?} {:?}", report.max_error_tensor, report.max_error);
    assert!(report.checked_coords > report.skipped_kink_coords);
    assert!(report.tensors.iter().any(|t| t.name == "layer0.phi" && t.checked > 0));
    assert!(report.tensors.iter().any(|t| t.name == "pos_readout" && t.checked > 0));
}

#[test]
fn gradient_check_without_normalization() {
    let params = ModelParams::init(&ModelConfig { norm: NormMode::None, ..small_config() }, 2).unwrap();
    let batch = [reference_scenario(5, 4, 2, 8)];
    // gradients down to 1e-10 here, below the roundoff floor of a 1e-5 step
    let opts = GradCheckOptions { h: 1e-4, tol: 1e-3, ..Default::default() };
    let report = grad_check(&params, &batch, &opts).unwrap();
    assert!(report.passed, "{:?} {:?}", report.max_error_tensor, report.max_error);
}

#[test]
fn corrupted_gradient_is_flagged() {
    let params = ModelParams::init(&small_config(), 11).unwrap();
    let batch = [reference_scenario(11, 4, 2, 8), reference_scenario(12, 4, 2, 8)];
    let preps: Vec<Prepared> = batch.iter().map(|s| Prepared::new(s, &params.config).unwrap()).collect();
    let refs: Vec<&Prepared> = preps.iter().collect();
    let labels: Vec<usize> = batch.iter().map(|s| params.config.class_index(&s.label).unwrap()).collect();
    let fwd = forward_batch(&params, &refs, Mode::Train).unwrap();
    let (_, mut g) = backward_batch(&params, &refs, &fwd, &labels).unwrap();
    g.net.head_weight[[0, 0]] *= 1.1;
    let report = grad_check_with(&params, &batch, &g, &GradCheckOptions::default()).unwrap();
    assert!(!report.passed);
    assert_eq!(report.failing_tensors(), vec!["head.weight"]);
}

#[test]
fn running_stats_move_only_in_train_mode() {
    let mut params = ModelParams::init(&small_config(), 0).unwrap();
    let batch = [reference_scenario(1, 4, 2, 8), reference_scenario(2, 4, 2, 8)];
    let preps: Vec<Prepared> = batch.iter().map(|s| Prepared::new(s, &params.config).unwrap()).collect();
    let refs: Vec<&Prepared> = preps.iter().collect();
    let before = params.running.clone();
    let eval = forward_batch(&params, &refs, Mode::Eval).unwrap();
    update_running_stats(&mut params, &eval);
    assert_eq!(params.running, before);
    let fwd = forward_batch(&params, &refs, Mode::Train).unwrap();
    update_running_stats(&mut params, &fwd);
    assert_ne!(params.running, before);
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let scenarios: Vec<_> = (0..8).map(|i| reference_scenario(i, 4, 2, 8)).collect();
    let cfg = TrainConfig { epochs: 15, batch_size: 4, seed: 1, optimizer: Adam { lr: 1e-2, ..Adam::default() }, ..Default::default() };
    let run = || {
        let mut p = ModelParams::init(&small_config(), 4).unwrap();
        let h = train(&mut p, &scenarios, &[], &cfg).unwrap();
        (p, h)
    };
    let (pa, ha) = run();
    let (pb, hb) = run();
    assert_eq!(pa, pb);
    assert_eq!(ha.digest(), hb.digest());
    assert!(ha.epochs.last().unwrap().loss < ha.epochs[0].loss);
}

#[test]
fn batch_norm_needs_two_per_batch() {
    let scenarios: Vec<_> = (0..4).map(|i| reference_scenario(i, 4, 2, 8)).collect();
    let mut p = ModelParams::init(&small_config(), 4).unwrap();
    let cfg = TrainConfig { batch_size: 1, ..Default::default() };
    assert!(matches!(train(&mut p, &scenarios, &[], &cfg), Err(crate::Error::Config(_))));
    assert!(matches!(train(&mut p, &[], &[], &TrainConfig::default()), Err(crate::Error::Config(_))));
}


#[test]
fn gradient_check_linear_regime() {
    // ego only, nonnegative weights and inputs: every ReLU passes its input through
    let mut s = reference_scenario(7, 4, 0, 8);
    s.ego_feature.iter_mut().for_each(|v| *v = v.abs() + 0.1);
    s.context.iter_mut().flatten().for_each(|v| *v = v.abs());
    let mut params = ModelParams::init(&ModelConfig { norm: NormMode::None, ..small_config() }, 3).unwrap();
    params.net.input.mapv_inplace(f64::abs);
    for l in &mut params.net.layers {
        l.spatial.mapv_inplace(f64::abs);
        l.temporal.iter_mut().for_each(|k| k.mapv_inplace(f64::abs));
    }
    let report = grad_check(&params, &[s], &GradCheckOptions::default()).unwrap();
    assert_eq!(report.skipped_kink_coords, 0);
    assert!(report.max_error < 1e-8, "{:?} {}", report.max_error_tensor, report.max_error);
}

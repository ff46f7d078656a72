mod common;

use common::{numeric_gradient, random_tensor, rel_err};
use ofnet::loss::{total_loss, total_loss_on_graph, LossConfig};
use ofnet::model::{build_model, ModelVariant};
use ofnet::optim::{OptimState, OptimizerKind};
use ofnet::synth::{generate_dataset, SceneSpec};
use ofnet::train::{train, Schedule, TrainConfig, TrainOutput};
use ofnet::{Error, Graph, ParamStore, Tensor};

fn store(values: &[f64]) -> (ParamStore<f64>, ofnet::ParamId) {
    let mut s = ParamStore::new();
    let id = s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
    (s, id)
}

#[test]
fn sgd_with_momentum_matches_hand_updates() {
    let (mut s, id) = store(&[1.0, -2.0]);
    let mut opt = OptimState::new(OptimizerKind::Sgd { momentum: 0.9 }, 0.1, 0.0, &s);
    s.get_mut(id).grad = Some(vec![0.5, 1.0]);
    opt.step(&mut s).unwrap();
    // v = g; w -= 0.1 v
    assert_eq!(s.get(id).data(), &[0.95, -2.1]);
    s.get_mut(id).grad = Some(vec![0.5, 1.0]);
    opt.step(&mut s).unwrap();
    // v = 0.9 g + g = 1.9 g
    let w = s.get(id).data();
    assert!((w[0] - (0.95 - 0.1 * 0.95)).abs() < 1e-15);
    assert!((w[1] - (-2.1 - 0.1 * 1.9)).abs() < 1e-15);
}

#[test]
fn weight_decay_is_added_to_the_gradient() {
    let (mut s, id) = store(&[2.0]);
    let mut opt = OptimState::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.5, 0.1, &s);
    s.get_mut(id).grad = Some(vec![0.0]);
    opt.step(&mut s).unwrap();
    assert!((s.get(id).data()[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
}

#[test]
fn adam_matches_reference_recurrence() {
    let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
    let (mut s, id) = store(&[0.3]);
    let mut opt = OptimState::new(OptimizerKind::Adam { beta1: b1, beta2: b2, eps }, lr, 0.0, &s);
    let grads = [0.2, -0.4, 0.1];
    let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        s.get_mut(id).grad = Some(vec![g]);
        opt.step(&mut s).unwrap();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let k = (t + 1) as i32;
        w -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
        assert!((s.get(id).data()[0] - w).abs() < 1e-14, "step {}", t + 1);
    }
    assert_eq!(opt.steps_taken(), 3);
}

#[test]
fn adam_first_step_is_learning_rate_sized() {
    let (mut s, id) = store(&[0.0, 0.0]);
    let mut opt = OptimState::new(OptimizerKind::default(), 1e-3, 0.0, &s);
    s.get_mut(id).grad = Some(vec![123.0, -1e-3]);
    opt.step(&mut s).unwrap();
    let w = s.get(id).data();
    assert!((w[0] + 1e-3).abs() < 1e-9);
    assert!((w[1] - 1e-3).abs() < 1e-8);
}

#[test]
fn missing_gradient_counts_as_zero() {
    let (mut s, id) = store(&[1.5]);
    let mut opt = OptimState::new(OptimizerKind::default(), 0.1, 0.0, &s);
    opt.step(&mut s).unwrap();
    assert_eq!(s.get(id).data(), &[1.5]);
}

#[test]
fn cosine_schedule_endpoints() {
    let cfg = TrainConfig { iterations: 101, learning_rate: 2e-4, schedule: Schedule::Cosine { final_fraction: 0.05 }, ..TrainConfig::default() };
    assert_eq!(cfg.learning_rate_at(0), 2e-4);
    assert!((cfg.learning_rate_at(100) - 1e-5).abs() < 1e-18);
    assert!((cfg.learning_rate_at(50) - 2e-4 * 0.525).abs() < 1e-15);
    let rates: Vec<f64> = (0..101).map(|s| cfg.learning_rate_at(s)).collect();
    assert!(rates.windows(2).all(|w| w[1] <= w[0]));

    let constant = TrainConfig { schedule: Schedule::Constant, ..cfg };
    assert_eq!(constant.learning_rate_at(77), 2e-4);
}

#[test]
fn loss_gradient_through_the_graph_matches_finite_differences() {
    let shape = [2, 1, 4, 5];
    let logits = random_tensor(&shape, 1);
    let ori = random_tensor(&shape, 2).map(|v| 3.0 * v);
    let gt_edge = random_tensor(&shape, 3).map(|v| if v > 0.3 { 1.0 } else { 0.0 });
    let gt_ori = random_tensor(&shape, 4).map(|v| 3.0 * v);
    for only_on_edges in [true, false] {
        let cfg = LossConfig { lambda: 0.7, orientation_only_on_gt_edges: only_on_edges, ..LossConfig::default() };

        let mut g = Graph::new();
        let (lv, ov) = (g.input(logits.clone().with_requires_grad(true)), g.input(ori.clone().with_requires_grad(true)));
        let prob = g.sigmoid(lv);
        let (loss, value) = total_loss_on_graph(&mut g, prob, ov, &gt_edge, &gt_ori, &cfg).unwrap();
        assert_eq!(g.value(loss).data()[0], value.total);
        let grads = g.backward(loss).unwrap();

        let sig = |t: &Tensor<f64>| t.map(|v| 1.0 / (1.0 + (-v).exp()));
        let num_l = numeric_gradient(&logits, 1e-6, |l| total_loss(&sig(l), &gt_edge, &ori, &gt_ori, &cfg).unwrap().total);
        let num_o = numeric_gradient(&ori, 1e-6, |o| total_loss(&sig(&logits), &gt_edge, o, &gt_ori, &cfg).unwrap().total);
        assert!(rel_err(grads.wrt(lv).unwrap(), &num_l) < 1e-6, "edge path");
        assert!(rel_err(grads.wrt(ov).unwrap(), &num_o) < 1e-6, "orientation path");
    }
}

fn tiny_data(count: usize, seed: u64) -> Vec<ofnet::synth::OcclusionSample> {
    generate_dataset(&SceneSpec { height: 40, width: 40, ..SceneSpec::default() }, count, seed, "").unwrap()
}

fn quick(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig { iterations, crop: 32, seed, ..TrainConfig::default() }
}

#[test]
fn same_seed_gives_identical_first_loss() {
    let data = tiny_data(3, 4);
    let run = |seed| {
        let mut m = build_model::<f32>(&ModelVariant::tiny(), seed).unwrap();
        train(&mut m, &data, &quick(1, seed), None, |_| {}).unwrap()[0]
    };
    let (a, b) = (run(5), run(5));
    assert_eq!(a.total.to_bits(), b.total.to_bits());
    assert_ne!(a.total.to_bits(), run(6).total.to_bits());
}

#[test]
fn training_reduces_the_loss_on_one_sample() {
    let data = tiny_data(1, 9);
    let mut m = build_model::<f32>(&ModelVariant::tiny(), 0).unwrap();
    let cfg = TrainConfig { iterations: 30, crop: 0, flip: false, learning_rate: 1e-3, ..TrainConfig::default() };
    let log = train(&mut m, &data, &cfg, None, |_| {}).unwrap();
    let head: f64 = log[..5].iter().map(|r| r.total).sum();
    let tail: f64 = log[25..].iter().map(|r| r.total).sum();
    assert!(tail < 0.7 * head, "head {head} tail {tail}");
}

#[test]
fn zero_iterations_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: dir.path().to_path_buf() };
    let mut m = build_model::<f32>(&ModelVariant::tiny(), 0).unwrap();
    let log = train(&mut m, &tiny_data(1, 0), &quick(0, 0), Some(&out), |_| {}).unwrap();
    assert!(log.is_empty());
    assert!(out.checkpoint(0).exists());
    assert!(!out.last_checkpoint().exists());
    assert!(!out.loss_log().exists());
}

#[test]
fn outputs_follow_the_checkpoint_interval() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: dir.path().to_path_buf() };
    let mut m = build_model::<f32>(&ModelVariant::tiny(), 0).unwrap();
    let cfg = TrainConfig { checkpoint_every: 2, ..quick(3, 0) };
    let mut seen = Vec::new();
    train(&mut m, &tiny_data(2, 1), &cfg, Some(&out), |r| seen.push(r.step)).unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    assert!(out.checkpoint(2).exists());
    assert!(!out.checkpoint(3).exists());
    assert!(out.last_checkpoint().exists());
    let csv = std::fs::read_to_string(out.loss_log()).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("step,edge_loss,orientation_loss,total_loss"));
}

#[test]
fn divergence_names_the_step() {
    let mut m = build_model::<f32>(&ModelVariant::tiny(), 0).unwrap();
    let cfg = TrainConfig { learning_rate: 1e30, clip_grad_norm: None, ..quick(20, 0) };
    match train(&mut m, &tiny_data(2, 2), &cfg, None, |_| {}) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("step "), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn empty_training_set_is_a_data_error() {
    let mut m = build_model::<f32>(&ModelVariant::tiny(), 0).unwrap();
    assert!(matches!(train(&mut m, &[], &quick(1, 0), None, |_| {}), Err(Error::Data(_))));
}

#[test]
fn invalid_config_is_rejected_before_training() {
    let mut m = build_model::<f32>(&ModelVariant::tiny(), 0).unwrap();
    for cfg in [
        TrainConfig { batch_size: 0, ..quick(1, 0) },
        TrainConfig { learning_rate: -1.0, ..quick(1, 0) },
        TrainConfig { schedule: Schedule::Cosine { final_fraction: 2.0 }, ..quick(1, 0) },
    ] {
        assert!(matches!(train(&mut m, &tiny_data(1, 0), &cfg, None, |_| {}), Err(Error::Config(_))));
    }
}

use cac_core::cac::GateMode;
use cac_core::data::{synth_dataset, SynthKind};
use cac_core::nn::layers::softmax_cross_entropy;
use cac_core::nn::{
    evaluate, forward_backward, metrics_jsonl, objective_value, train, CostContext, Model, ModelSpec, OptimizerConfig,
    Phase, TrainConfig,
};
use cac_core::oracle::{finite_diff_grad, FD_EPS_F64};
use cac_core::tensor::{rel_norm_error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-3;

fn batch(seed: u64, shape: &[usize], classes: usize) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let labels = (0..shape[0]).map(|_| rng.random_range(0..classes)).collect();
    (x, labels)
}

/// Worst relative error between analytic and central-difference gradients
/// of the full objective over every parameter tensor.
fn objective_grad_error(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], lambda: f64) -> (f64, String) {
    let mut m = model.clone();
    forward_backward(&mut m, x, labels, lambda).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = m.params().iter().map(|p| (p.name.clone(), p.grad.data().to_vec())).collect();
    let mut worst = (0.0, String::new());
    for (pi, (name, g)) in analytic.iter().enumerate() {
        let theta = model.params()[pi].value.data().to_vec();
        let fd = finite_diff_grad(
            |th| {
                let mut probe = model.clone();
                probe.params_mut()[pi].value.data_mut().copy_from_slice(th);
                objective_value(&probe, x, labels, lambda).unwrap()
            },
            &theta,
            FD_EPS_F64,
        )
        .unwrap();
        let err = rel_norm_error(g, &fd, 1e-10);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    worst
}

#[test]
fn one_cac_layer_objective_gradients() {
    for (i, &lambda) in [0.0, 0.3, 1.0].iter().enumerate() {
        let mut spec = ModelSpec::one_cac_layer([2, 6, 6], 3, 3);
        spec.gate_init.beta = -0.4;
        spec.gate_init.gamma = 0.8;
        let model = Model::<f64>::new(&spec, 10 + i as u64).unwrap();
        let (x, labels) = batch(20 + i as u64, &[3, 2, 6, 6], 3);
        let (err, name) = objective_grad_error(&model, &x, &labels, lambda);
        assert!(err <= GRAD_TOL, "lambda {lambda}: {name} rel err {err}");
    }
}

#[test]
fn three_block_network_objective_gradients() {
    let mut spec = ModelSpec::three_layer_cnn([2, 12, 12], 3, [3, 3, 3]);
    spec.gate_init.beta = -1.0;
    let model = Model::<f64>::new(&spec, 3).unwrap();
    let (x, labels) = batch(4, &[4, 2, 12, 12], 3);
    let (err, name) = objective_grad_error(&model, &x, &labels, 0.5);
    assert!(err <= GRAD_TOL, "{name} rel err {err}");
}

#[test]
fn lambda_zero_gradient_is_the_task_gradient() {
    let spec = ModelSpec::one_cac_layer([1, 6, 6], 2, 2);
    let model = Model::<f64>::new(&spec, 1).unwrap();
    let (x, labels) = batch(2, &[4, 1, 6, 6], 2);

    let mut a = model.clone();
    forward_backward(&mut a, &x, &labels, 0.0).unwrap();

    let mut b = model.clone();
    let fwd = b.forward(&x, Phase::Train).unwrap();
    let (_, dlogits) = softmax_cross_entropy(&fwd.logits, &labels).unwrap();
    b.backward(&fwd, &dlogits, &[0.0]).unwrap();

    for (pa, pb) in a.params().iter().zip(b.params()) {
        assert_eq!(pa.grad, pb.grad, "{}", pa.name);
    }
}

#[test]
fn uniform_logits_give_ln_ten() {
    let logits = Tensor::<f64>::zeros(&[20, 10]);
    let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
    let (l, _) = softmax_cross_entropy(&logits, &labels).unwrap();
    assert!((l - std::f64::consts::LN_10).abs() < 1e-14);
}

fn small_cfg(lambda: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        seed: 7,
        epochs,
        batch_size: 20,
        lambda,
        optimizer: OptimizerConfig { lr: 0.05, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn logged_objective_is_the_weighted_product() {
    let data = synth_dataset(SynthKind::SmoothVsTextured, 60, 1, 1, 8).unwrap();
    let spec = ModelSpec::one_cac_layer([1, 8, 8], 2, 4);
    let out = train(&spec, &small_cfg(0.3, 2), &data, None, None).unwrap();
    assert_eq!(out.steps.len(), 6);
    for s in &out.steps {
        let want = s.task_loss * s.cost_ratio_soft.powf(s.lambda);
        assert_eq!(s.objective, want, "{s:?}");
    }
}

#[test]
fn frozen_gates_track_the_dense_baseline() {
    let data = synth_dataset(SynthKind::TwoGaussians, 80, 2, 1, 8).unwrap();
    let mut spec = ModelSpec::three_layer_cnn([1, 8, 8], 2, [3, 4, 4]);
    spec.layers.truncate(8);
    spec.layers.extend([cac_core::nn::LayerSpec::GlobalAvgpool, cac_core::nn::LayerSpec::Linear { out: 2 }]);
    spec.gate = GateMode::FrozenSharp;
    let cfg = small_cfg(0.0, 3);
    let cac = train(&spec, &cfg, &data, None, None).unwrap();
    let dense = train(&spec.baseline(), &cfg, &data, None, None).unwrap();
    assert_eq!(cac.steps.len(), dense.steps.len());
    for (a, b) in cac.steps.iter().zip(&dense.steps) {
        assert!((a.task_loss - b.task_loss).abs() <= 1e-5, "{a:?} vs {b:?}");
    }
}

#[test]
fn smoke_run_loss_decreases() {
    let data = synth_dataset(SynthKind::SmoothVsTextured, 200, 5, 3, 16).unwrap();
    let spec = ModelSpec::one_cac_layer([3, 16, 16], 2, 8);
    let cfg = TrainConfig { seed: 3, epochs: 20, batch_size: 20, lambda: 0.3, ..Default::default() };
    let out = train(&spec, &cfg, &data, None, None).unwrap();
    let losses: Vec<f64> = out.epochs.iter().map(|e| e.task_loss).collect();
    for w in losses[..5].windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let data = synth_dataset(SynthKind::SmoothVsTextured, 40, 9, 1, 8).unwrap();
    let spec = ModelSpec::one_cac_layer([1, 8, 8], 2, 3);
    let mut cfg = small_cfg(0.3, 2);
    cfg.augment_flip = true;
    cfg.augment_crop_pad = 1;
    let a = metrics_jsonl(&train(&spec, &cfg, &data, None, None).unwrap().epochs).unwrap();
    let b = metrics_jsonl(&train(&spec, &cfg, &data, None, None).unwrap().epochs).unwrap();
    assert_eq!(a, b);
    cfg.seed += 1;
    let c = metrics_jsonl(&train(&spec, &cfg, &data, None, None).unwrap().epochs).unwrap();
    assert_ne!(a, c);
}

#[test]
fn constant_images_close_the_gate() {
    let mut spec = ModelSpec::one_cac_layer([3, 8, 8], 2, 4);
    spec.gate_init.beta = -0.5;
    let model = Model::<f32>::new(&spec, 0).unwrap();
    let images = Tensor::from_fn(&[4, 3, 8, 8], |i| (i / 192) as f32 * 0.3);
    let data = cac_core::Dataset::new(images, vec![0, 1, 0, 1], 2, "const").unwrap();
    let r = evaluate(&model, &data, 3).unwrap();
    assert_eq!(r.layers[0].rho_mean, 0.0);
    assert!(r.per_sample_rho[0].iter().all(|&v| v == 0.0));
}

#[test]
fn frozen_gates_cost_the_same_for_every_sample() {
    let mut spec = ModelSpec::one_cac_layer([3, 8, 8], 2, 4);
    spec.gate = GateMode::FrozenSharp;
    let model = Model::<f32>::new(&spec, 0).unwrap();
    let data = synth_dataset(SynthKind::SmoothVsTextured, 6, 0, 3, 8).unwrap();
    let r = evaluate(&model, &data, 4).unwrap();
    let first = r.per_sample_madds[0];
    assert!(r.per_sample_madds.iter().all(|&m| m == first));
    // baseline plus the score-map term 13·n²
    assert_eq!(first, r.madds_baseline + 13.0 * 64.0);
}

#[test]
fn mean_dynamic_cost_is_cost_at_mean_ratio() {
    let mut spec = ModelSpec::three_layer_cnn([3, 16, 16], 2, [4, 6, 6]);
    spec.gate_init.beta = -2.0;
    let model = Model::<f32>::new(&spec, 4).unwrap();
    let data = synth_dataset(SynthKind::SmoothVsTextured, 12, 1, 3, 16).unwrap();
    let r = evaluate(&model, &data, 5).unwrap();
    let means: Vec<f64> = r.layers.iter().map(|l| l.rho_mean).collect();
    let at_mean = CostContext::new(&spec).unwrap().madds(&means).unwrap();
    assert!((r.madds_mean - at_mean).abs() <= 1e-9 * at_mean, "{} vs {at_mean}", r.madds_mean);
    assert!(r.madds_std > 0.0);
    let report = r.cost_report(&spec).unwrap();
    assert!((report.totals.c_model - at_mean).abs() <= 1e-9 * at_mean);
}

#[test]
fn one_cac_layer_classifier_generalises() {
    let all = synth_dataset(SynthKind::SmoothVsTextured, 2600, 11, 3, 16).unwrap();
    let (train_set, test_set) = all.split_tail(2000).unwrap();
    let spec = ModelSpec::one_cac_layer([3, 16, 16], 2, 8);
    let cfg = TrainConfig { seed: 1, epochs: 5, batch_size: 32, lambda: 0.3, ..Default::default() };
    let out = train(&spec, &cfg, &train_set, None, None).unwrap();
    let r = evaluate(&out.model, &test_set, 256).unwrap();
    assert!(r.top1_error <= 0.05, "held-out error {}", r.top1_error);
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(SynthKind::TwoGaussians, 40, 1, 1, 8).unwrap();
    let spec = ModelSpec::one_cac_layer([1, 8, 8], 2, 3);
    let mut cfg = small_cfg(0.0, 1);
    train(&spec, &cfg, &data, None, Some(dir.path())).unwrap();
    let ckpt = std::fs::read(dir.path().join("checkpoint.bin")).unwrap();
    cfg.optimizer.lr = 1e30;
    cfg.epochs = 3;
    let err = train(&spec, &cfg, &data, None, Some(dir.path())).unwrap_err();
    assert!(matches!(err, cac_core::CacError::NumericFailure { .. }), "{err}");
    assert!(err.to_string().contains("epoch 0"), "{err}");
    assert_eq!(std::fs::read(dir.path().join("checkpoint.bin")).unwrap(), ckpt);
}

#[test]
fn train_writes_outputs_and_eval_uses_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(SynthKind::SmoothVsTextured, 40, 1, 1, 8).unwrap();
    let (tr, te) = data.split_tail(10).unwrap();
    let spec = ModelSpec::one_cac_layer([1, 8, 8], 2, 3);
    let out = train(&spec, &small_cfg(0.3, 2), &tr, Some(&te), Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["epoch", "task_loss", "objective", "top1_error", "cost_ratio_soft", "cost_ratio_hard", "rho"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert!(first["test_top1_error"].is_number());
    let loaded = cac_core::load_checkpoint(&dir.path().join("checkpoint.bin")).unwrap();
    let a = evaluate(&out.model, &te, 4).unwrap();
    let b = evaluate(&loaded, &te, 4).unwrap();
    assert_eq!(a, b);
}

/// Same protocol as the CIFAR-10 trade-off check, on synthetic data that needs no download.
/// A quarter of the training labels are flipped so the task loss stays away from zero;
/// the cost pressure of the weighted product scales with it.
#[test]
fn lambda_tradeoff_on_synthetic_textures() {
    let all = synth_dataset(SynthKind::SmoothVsTextured, 800, 12, 3, 16).unwrap();
    let (mut train_set, test_set) = all.split_tail(200).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for l in train_set.labels.iter_mut() {
        if rng.random_bool(0.25) {
            *l = 1 - *l;
        }
    }
    let spec = ModelSpec::three_layer_cnn([3, 16, 16], 2, [8, 16, 16]);
    let mut runs = Vec::new();
    for lambda in [0.0, 0.3, 1.0] {
        let cfg = TrainConfig { seed: 12, epochs: 12, batch_size: 16, lambda, ..Default::default() };
        let out = train(&spec, &cfg, &train_set, None, None).unwrap();
        runs.push(evaluate(&out.model, &test_set, 100).unwrap());
    }
    let ratios: Vec<f64> = runs.iter().map(|r| r.cost_ratio_hard).collect();
    let errors: Vec<f64> = runs.iter().map(|r| r.top1_error).collect();
    let reduction = 1.0 - runs[1].madds_mean / runs[0].madds_mean;
    eprintln!("ratios {ratios:?} errors {errors:?} reduction {reduction}");
    assert!(ratios[1] <= ratios[0] && ratios[2] <= ratios[1], "{ratios:?}");
    assert!(reduction >= 0.10, "reduction {reduction}");
    assert!(errors[1] <= errors[0] + 0.02, "{errors:?}");
}

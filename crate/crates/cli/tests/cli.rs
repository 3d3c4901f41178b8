use std::path::Path;
use std::process::{Command, Output};

use cac_core::nn::{GateInit, LayerSpec};
use cac_core::{save_checkpoint, Model, ModelSpec};

fn cac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cac")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, extra: &str, model: &ModelSpec) -> String {
    let path = dir.join(name);
    let text = format!(
        r#"{{"seed": 7, "epochs": 3, "batch_size": 16,
            "dataset": {{"kind": "synthetic", "synth_n": 120, "synth_holdout": 40}},
            "model": {}, "output_dir": "{}" {extra}}}"#,
        serde_json::to_string(model).unwrap(),
        name.trim_end_matches(".json")
    );
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn metrics(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn verify_exits_zero() {
    let o = cac(&["verify"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&cac(&["verify", "--bogus"])), 2);
    assert_eq!(code(&cac(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": 3, "lamda": 1}"#).unwrap();
    let o = cac(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.json"), "{}", stderr(&o));
}

#[test]
fn unreadable_inputs_fail_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cost.csv");
    let o = cac(&["analyze", "--model", "/nonexistent/ckpt.bin", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/nonexistent/ckpt.bin"));
    assert!(!out.exists());
}

#[test]
fn corrupted_cifar_is_reported_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(&ModelSpec::one_cac_layer([3, 32, 32], 10, 4), 0).unwrap();
    let ckpt = dir.path().join("m.bin");
    save_checkpoint(&ckpt, &model).unwrap();
    let data = dir.path().join("cifar");
    std::fs::create_dir(&data).unwrap();
    std::fs::write(data.join("data_batch_1.bin"), vec![0u8; 3073 + 5]).unwrap();
    let o = cac(&["eval", "--model", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("byte offset"), "{}", stderr(&o));
}

#[test]
fn train_eval_analyze_export() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec::three_layer_cnn([1, 12, 12], 2, [4, 4, 4]);
    let cfg = write_config(dir.path(), "run.json", "", &spec);
    let o = cac(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = dir.path().join("run");
    assert_eq!(metrics(&run).len(), 3);
    let ckpt = run.join("checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();

    let o = cac(&["eval", "--model", ckpt, "--data", "synthetic:smooth_vs_textured:40:9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["samples"], 40);
    assert_eq!(report["layers"].as_array().unwrap().len(), 3);

    let csv = dir.path().join("cost.csv");
    let args = ["analyze", "--model", ckpt, "--data", "synthetic::40:9", "--out", csv.to_str().unwrap()];
    assert_eq!(code(&cac(&args)), 0);
    let first = std::fs::read(&csv).unwrap();
    let totals = std::fs::read(dir.path().join("cost.json")).unwrap();
    assert_eq!(code(&cac(&args)), 0);
    assert_eq!(std::fs::read(&csv).unwrap(), first);
    assert_eq!(std::fs::read(dir.path().join("cost.json")).unwrap(), totals);
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("layer_id,rho_mean,rho_std,omega_conv,omega_cac,rho_bar\n"));
    assert_eq!(text.lines().count(), 1 + 3);
    let totals: serde_json::Value = serde_json::from_slice(&totals).unwrap();
    assert!(totals["totals"]["ratio"].as_f64().unwrap() > 0.0);

    let maps = dir.path().join("maps");
    let o = cac(&["export-ratios", "--model", ckpt, "--image", "3", "--out-dir", maps.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let l0 = std::fs::read_to_string(maps.join("l0_image3.csv")).unwrap();
    assert_eq!(l0.lines().next().unwrap(), "index,G,M,sharp");
    assert_eq!(l0.lines().count(), 1 + 144);
    assert_eq!(std::fs::read_dir(&maps).unwrap().count(), 3);
    assert_eq!(code(&cac(&["export-ratios", "--model", ckpt, "--image", "400"])), 2);
}

#[test]
fn analyze_toy_layer_all_sharp() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ModelSpec {
        input: [16, 32, 32],
        num_classes: 16,
        layers: vec![
            LayerSpec::Conv { c_out: 16, k: 3, cac: true, bias: false },
            LayerSpec::GlobalAvgpool,
            LayerSpec::SoftmaxCe,
        ],
        ..ModelSpec::one_cac_layer([16, 32, 32], 16, 16)
    };
    spec.gate_init = GateInit { gamma: 1.0, beta: 50.0 };
    let ckpt = dir.path().join("toy.bin");
    save_checkpoint(&ckpt, &Model::new(&spec, 1).unwrap()).unwrap();
    let csv = dir.path().join("toy.csv");
    let o = cac(&[
        "analyze", "--model", ckpt.to_str().unwrap(), "--data", "synthetic::8", "--out", csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "l0");
    assert_eq!(row[1], "1");
    assert_eq!(row[3], "2359296");
    assert_eq!(row[4], "2372608");
}

#[test]
fn frozen_gates_at_zero_lambda_match_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec::three_layer_cnn([1, 12, 12], 2, [4, 4, 4]);
    let a = write_config(dir.path(), "frozen.json", r#", "lambda": 0.0, "freeze_gates": true"#, &spec);
    let b = write_config(dir.path(), "base.json", r#", "lambda": 0.0"#, &spec.baseline());
    assert_eq!(code(&cac(&["train", "--config", &a])), 0);
    assert_eq!(code(&cac(&["train", "--config", &b])), 0);
    let (ma, mb) = (metrics(&dir.path().join("frozen")), metrics(&dir.path().join("base")));
    assert_eq!(ma.len(), mb.len());
    for (x, y) in ma.iter().zip(&mb) {
        for key in ["task_loss", "top1_error", "test_top1_error"] {
            let (u, v) = (x[key].as_f64().unwrap(), y[key].as_f64().unwrap());
            assert!((u - v).abs() <= 1e-5, "{key}: {u} vs {v}");
        }
    }
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let synth = cac_core::RunConfig::load(&root.join("synthetic.json")).unwrap();
    assert_eq!(synth.model_spec().unwrap(), ModelSpec::three_layer_cnn([1, 16, 16], 2, [8, 8, 8]));
    let cifar = cac_core::RunConfig::load(&root.join("cifar10.json")).unwrap();
    assert_eq!(cifar.model_spec().unwrap(), ModelSpec::three_layer_cnn([3, 32, 32], 10, [16, 32, 32]));
    assert_eq!(cifar.dataset.subset_size, Some(5000));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ccr-lab"));
    c.env("CCR_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ccr-lab")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "ccr-lab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_synthetic() -> Value {
    json!({
        "class_count": 2,
        "spurious_value_count": 2,
        "samples_per_class": 400,
        "causal_dim": 20,
        "spurious_dim": 2,
        "causal_mean_scale": 0.25,
        "causal_noise": 1.0,
        "spurious_mean_scale": 1.5,
        "spurious_noise": 0.5,
        "observation_probs": [[0.9, 0.1], [0.1, 0.9]]
    })
}

fn small_train(extra: Value) -> Value {
    let mut cfg = json!({"epochs": 2, "feature_dim": 4, "batch_size": 64});
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    cfg
}

fn write(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_spec(dir: &Path, seeds: &[u64]) -> PathBuf {
    let spec = json!({
        "data": {"synthetic": small_synthetic()},
        "stage1": small_train(json!({"beta": 0.5, "lambda": 0.0, "ipw_estimator": "none"})),
        "stage2": small_train(json!({"lambda": 0.5, "max_grad_norm": 1.0})),
        "seeds": seeds,
        "lambdas": [0.0, 0.5, 1.0]
    });
    write(dir, "spec.json", &spec)
}

#[test]
fn gen_writes_group_counts_summing_to_observed_n() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("data");
    ok(&["gen", "--seed", "7", "--out", s(&out)]);
    let groups = read_json(&out.join("groups.json"));
    let counts: Vec<u64> = groups["observed_counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(counts.len(), 4);
    assert_eq!(counts.iter().sum::<u64>(), groups["observed_n"].as_u64().unwrap());
    assert_eq!(groups["ideal_n"], 10_000);
    for f in ["ideal.fvec", "observed.fvec", "test.fvec", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn gen_is_byte_identical_for_equal_seeds() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "synth.json", &small_synthetic());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen", "--config", s(&cfg), "--seed", "3", "--out", s(&a)]);
    ok(&["gen", "--config", s(&cfg), "--seed", "3", "--out", s(&b)]);
    for f in ["ideal.fvec", "observed.fvec", "test.fvec", "groups.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let c = tmp.path().join("c");
    ok(&["gen", "--config", s(&cfg), "--seed", "4", "--out", s(&c)]);
    assert_ne!(fs::read(a.join("observed.fvec")).unwrap(), fs::read(c.join("observed.fvec")).unwrap());
}

#[test]
fn missing_config_exits_with_2() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = run(&["gen", "--config", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["run", "--config", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["eval", "--model", s(&missing), "--data", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_flags_exit_with_2() {
    assert_eq!(run(&["gen"]).status.code(), Some(2));
    let tmp = TempDir::new().unwrap();
    let out = run(&["run", "--variant", "other", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

fn staged_pipeline(tmp: &Path, estimator: &str, lambda: &str) -> PathBuf {
    let synth = write(tmp, "synth.json", &small_synthetic());
    let train1 = write(tmp, "train1.json", &small_train(json!({"beta": 0.5})));
    let train2 = write(tmp, "train2.json", &small_train(json!({"max_grad_norm": 1.0})));
    let data = tmp.join("data");
    let (m1, w, m2, ev, at) = (
        tmp.join("stage1"),
        tmp.join("weights"),
        tmp.join("stage2"),
        tmp.join("eval"),
        tmp.join("attr"),
    );
    ok(&["gen", "--config", s(&synth), "--seed", "1", "--out", s(&data)]);
    let observed = data.join("observed.fvec");
    ok(&["train1", "--data", s(&observed), "--config", s(&train1), "--out", s(&m1)]);
    let model1 = m1.join("model_stage1.json");
    ok(&[
        "weights",
        "--model",
        s(&model1),
        "--data",
        s(&observed),
        "--estimator",
        estimator,
        "--synthetic-config",
        s(&synth),
        "--out",
        s(&w),
    ]);
    ok(&[
        "train2",
        "--model",
        s(&model1),
        "--data",
        s(&observed),
        "--weights",
        s(&w.join("weights.csv")),
        "--config",
        s(&train2),
        "--lambda",
        lambda,
        "--variant",
        "paper",
        "--warm-start",
        "true",
        "--out",
        s(&m2),
    ]);
    let model = m2.join("model.json");
    let test = data.join("test.fvec");
    let printed = ok(&["eval", "--model", s(&model), "--data", s(&test), "--out", s(&ev)]);
    assert!(String::from_utf8_lossy(&printed.stdout).contains("worst"));
    ok(&["attribute", "--model", s(&model), "--data", s(&test), "--out", s(&at)]);
    tmp.to_path_buf()
}

#[test]
fn staged_pipeline_with_ccr_produces_metrics() {
    let tmp = TempDir::new().unwrap();
    let root = staged_pipeline(tmp.path(), "ccr", "3");
    let metrics = read_json(&root.join("eval/metrics.json"));
    let mean = metrics["mean_accuracy"].as_f64().unwrap();
    let wga = metrics["worst_group_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean) && wga <= mean);
    let attr = read_json(&root.join("attr/attribution.json"));
    let names: Vec<&str> = attr["blocks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["block"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["causal", "spurious"]);
    let csv = fs::read_to_string(root.join("weights/weights.csv")).unwrap();
    assert!(csv.starts_with("index,weight,pseudo_group\n"));
    assert!(root.join("weights/propensity.json").exists());
    let history = read_json(&root.join("stage2/history_stage2.json"));
    assert_eq!(history.as_array().unwrap().len(), 2);
}

#[test]
fn staged_pipeline_erm_and_oracle_run() {
    for est in ["none", "oracle", "jtt", "afr"] {
        let tmp = TempDir::new().unwrap();
        let root = staged_pipeline(tmp.path(), est, "0");
        assert!(root.join("eval/metrics.json").exists(), "{est}");
    }
}

#[test]
fn divergence_exits_with_3() {
    let tmp = TempDir::new().unwrap();
    let synth = write(tmp.path(), "synth.json", &small_synthetic());
    let data = tmp.path().join("data");
    ok(&["gen", "--config", s(&synth), "--out", s(&data)]);
    let cfg = write(tmp.path(), "hot.json", &small_train(json!({"learning_rate": 1e200, "epochs": 3})));
    let out = run(&[
        "train1",
        "--data",
        s(&data.join("observed.fvec")),
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_writes_all_artifacts_and_is_idempotent() {
    let tmp = TempDir::new().unwrap();
    let spec = small_spec(tmp.path(), &[5]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["run", "--config", s(&spec), "--estimator", "ccr", "--lambda", "3", "--out", s(dir)]);
    }
    let manifest = read_json(&a.join("manifest.json"));
    let artifacts = manifest["artifacts"].as_object().unwrap();
    for f in [
        "model_stage1.json",
        "model.json",
        "history_stage1.json",
        "history_stage2.json",
        "weights.csv",
        "metrics.json",
        "attribution.json",
    ] {
        assert!(artifacts.contains_key(f), "{f} not in manifest");
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(manifest["config_sha256"].as_object().unwrap().len(), 1);
    let metrics = read_json(&a.join("metrics.json"));
    assert!(metrics.get("mean_accuracy").is_some() && metrics.get("worst_group_accuracy").is_some());
}

#[test]
fn sweep_writes_one_metrics_file_per_lambda() {
    let tmp = TempDir::new().unwrap();
    let spec = small_spec(tmp.path(), &[2]);
    let out = tmp.path().join("sweep");
    ok(&["sweep", "--config", s(&spec), "--out", s(&out)]);
    for l in ["0", "0.5", "1"] {
        assert!(out.join(format!("lambda_{l}/metrics.json")).exists(), "lambda {l}");
    }
    let summary = read_json(&out.join("sweep.json"));
    assert_eq!(summary["points"].as_array().unwrap().len(), 3);
    assert!(summary["selected_lambda"].is_number());
}

#[test]
fn compare_reports_four_methods_and_ablation_ten_rows() {
    let tmp = TempDir::new().unwrap();
    let spec = small_spec(tmp.path(), &[1]);
    let out = tmp.path().join("cmp");
    let printed = ok(&["compare", "--config", s(&spec), "--out", s(&out)]);
    let table = read_json(&out.join("comparison.json"));
    let rows = table["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["method"]["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["ERM", "JTT", "AFR", "CCR"]);
    assert!(rows.iter().all(|r| r["runs"].as_array().unwrap().len() == 1));
    assert_eq!(String::from_utf8_lossy(&printed.stdout).lines().count(), 5);

    let out = tmp.path().join("abl");
    ok(&["compare", "--config", s(&spec), "--ablation", "--out", s(&out)]);
    let table = read_json(&out.join("ablation.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 10);
}

#[test]
fn compare_medians_use_every_seed() {
    let tmp = TempDir::new().unwrap();
    let spec = small_spec(tmp.path(), &[1, 2, 3, 4, 5]);
    let out = tmp.path().join("cmp");
    ok(&["compare", "--config", s(&spec), "--out", s(&out)]);
    let table = read_json(&out.join("comparison.json"));
    for row in table["rows"].as_array().unwrap() {
        let runs = row["runs"].as_array().unwrap();
        assert_eq!(runs.len(), 5);
        let mut wga: Vec<f64> = runs.iter().map(|r| r["worst_group_accuracy"].as_f64().unwrap()).collect();
        wga.sort_by(f64::total_cmp);
        assert_eq!(row["worst_group_accuracy"]["median"].as_f64().unwrap(), wga[2]);
    }
}

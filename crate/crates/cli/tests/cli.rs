use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepcox")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(
        &path,
        r#"{
  "generator": {"n_persons": 400, "baseline_hazard_per_day": 5e-5, "seed": 3},
  "net": {"embed_dim": 3, "gru_layers": 1, "dropout_rate": 0.0},
  "train": {"epochs": 1, "ensemble_size": 1, "batch_cases": 16},
  "encoding": {"min_count": 5}
}"#,
    )
    .unwrap();
    path
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn failures_print_one_json_line_and_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("model");
    let o = run(&["train", "--cohort", s(&dir.path().join("missing.jsonl")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8(o.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["status"], "error");
    assert_eq!(v["command"], "train");
    assert!(v["error"].as_str().unwrap().contains("missing.jsonl"));
    assert!(!out.exists());
    assert!(!dir.path().join("model.partial").exists());

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epoch": 3}}"#).unwrap();
    let o = run(&["generate", "--config", s(&bad), "--out", s(&dir.path().join("g"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pipeline_writes_manifests_and_respects_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert!(run(&["generate", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let again = run(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(again.status.code(), Some(1));
    assert!(run(&["generate", "--config", s(&cfg), "--out", s(&data), "--force"]).status.success());

    let cohort = data.join("cohort.jsonl");
    let models = dir.path().join("models");
    let o = run(&["train", "--config", s(&cfg), "--cohort", s(&cohort), "--runs", "2", "--out", s(&models)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(models.join("run_000/config.json").is_file() && models.join("run_001/config.json").is_file());

    let eval = dir.path().join("eval");
    let o = run(&[
        "evaluate", "--config", s(&cfg), "--model", s(&models.join("run_000")), "--cohort", s(&cohort),
        "--stratify", "meds", "--out", s(&eval),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,value\n") && metrics.contains("Harrell's C,"));
    assert!(eval.join("strata/meds/summary.csv").is_file());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "evaluate");
    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap()).collect();
    assert!(outputs.contains(&"calibration.csv"));
    let inputs = manifest["inputs"].as_array().unwrap();
    assert!(inputs.iter().any(|i| i["path"].as_str().unwrap().ends_with("cohort.jsonl")));
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));

    let plots = dir.path().join("plots");
    assert!(run(&["plot", "--report", s(&eval), "--out", s(&plots)]).status.success());
    assert!(plots.join("calibration.svg").is_file());

    let perturbations = dir.path().join("p.jsonl");
    std::fs::write(&perturbations, "{\"label\":\"dm\",\"kind\":\"set_predictor\",\"field\":\"diabetes\",\"value\":1}\n").unwrap();
    let hr = dir.path().join("hr");
    let pattern = format!("{}/run_*", models.display());
    let o = run(&["explain", "--models", &pattern, "--perturbations", s(&perturbations), "--out", s(&hr)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(hr.join("local_hr.csv")).unwrap();
    let row: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[0], row[6]), ("dm", "2"));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diffpilot"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn small_spec(dir: &Path, seed: u64) -> PathBuf {
    let spec = serde_json::json!({
        "generator": {
            "n_screens": 8, "n_functions": 20, "branching": 2,
            "noop_fraction": 0.3, "exit_fraction": 0.05, "seed": seed
        },
        "seeds": [0, 1],
        "budget": 120,
        "max_directed_steps": 40,
        "targets": { "kind": "random_k", "k": 6 },
        "trainer": { "hidden": [16, 8], "min_fill": 200, "capacity": 5000 },
        "training": { "actions": 1500, "train_ratio": 0.25 }
    });
    let p = dir.join(format!("spec{seed}.json"));
    fs::write(&p, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_app_writes_loadable_model() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["gen-app", "--seed", "4", "--out", s(tmp.path())]);
    assert!(out.status.success());
    let m = diffpilot::load_app_model(tmp.path().join("app.json")).unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains(&m.fingerprint()));
}

#[test]
fn train_evaluate_replay_round_trip() {
    let tmp = TempDir::new().unwrap();
    let spec = small_spec(tmp.path(), 1);
    let train = tmp.path().join("train");
    assert!(run(&["train", "--config", s(&spec), "--out", s(&train)]).status.success());
    let ckpt = train.join("model.ckpt");
    assert!(ckpt.exists());
    let csv = fs::read_to_string(train.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,loss,buffer_size,synced,model_version\n"));

    let eval = tmp.path().join("eval");
    let out = run(&["evaluate", "--config", s(&spec), "--checkpoint", s(&ckpt), "--out", s(&eval)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("hawkeye"));

    for dir in [&train, &eval] {
        let out = run(&["replay", s(&dir.join("manifest.json"))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
        assert!(!String::from_utf8_lossy(&out.stdout).contains("DIFF"));
    }

    // Tampering with a recorded output makes replay fail.
    let reports = eval.join("reports.json");
    let mut text = fs::read_to_string(&reports).unwrap();
    text.push(' ');
    fs::write(&reports, text).unwrap();
    let replay_dir = tmp.path().join("replayed");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("manifest.json")).unwrap()).unwrap();
    let mut m = manifest.clone();
    m["outputs"]["reports.json"] = serde_json::Value::String("0".repeat(64));
    fs::write(eval.join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
    let out = run(&["replay", s(&eval.join("manifest.json")), "--out", s(&replay_dir)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("DIFF reports.json"));
}

#[test]
fn zero_budget_training_writes_manifest_only() {
    let tmp = TempDir::new().unwrap();
    let spec = small_spec(tmp.path(), 1);
    let out_dir = tmp.path().join("t0");
    assert!(run(&["train", "--config", s(&spec), "--budget", "0", "--out", s(&out_dir)]).status.success());
    assert!(out_dir.join("manifest.json").exists());
    assert!(!out_dir.join("model.ckpt").exists());
}

#[test]
fn baseline_is_reproducible_and_reports_merge() {
    let tmp = TempDir::new().unwrap();
    let spec = small_spec(tmp.path(), 2);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run(&["baseline", "--config", s(&spec), "--out", s(&a)]).status.success());
    assert!(run(&["baseline", "--config", s(&spec), "--out", s(&b)]).status.success());
    assert_eq!(fs::read(a.join("reports.json")).unwrap(), fs::read(b.join("reports.json")).unwrap());

    // A single run passes through the merge unchanged.
    let merged = tmp.path().join("merged");
    assert!(run(&["report", s(&a), "--out", s(&merged)]).status.success());
    for f in ["report.csv", "report.md"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(merged.join(f)).unwrap(), "{f}");
    }

    // Same seeds and targets under another policy join row by row.
    let u = tmp.path().join("u");
    assert!(run(&["evaluate", "--config", s(&spec), "--policy", "untrained", "--out", s(&u)]).status.success());
    let out = run(&["report", s(&a), s(&u), "--out", s(&merged)]);
    assert!(out.status.success());
    let csv = fs::read_to_string(merged.join("report.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("random_covered") && csv.contains("untrained_covered"));
    assert_eq!(csv.lines().count(), 3);

    // Different target sets for the same seed are refused.
    let other = tmp.path().join("other");
    assert!(run(&["baseline", "--config", s(&spec), "--budget", "50", "--seed", "0", "--out", s(&other)]).status.success());
    let spec_k: serde_json::Value = serde_json::from_str(&fs::read_to_string(&spec).unwrap()).unwrap();
    let mut k3 = spec_k.clone();
    k3["targets"]["k"] = 3.into();
    let spec3 = tmp.path().join("k3.json");
    fs::write(&spec3, k3.to_string()).unwrap();
    let c = tmp.path().join("c");
    assert!(run(&["evaluate", "--config", s(&spec3), "--policy", "untrained", "--out", s(&c)]).status.success());
    assert_eq!(run(&["report", s(&a), s(&c), "--out", s(&merged)]).status.code(), Some(2));
}

#[test]
fn commit_eval_table_has_policy_columns() {
    let tmp = TempDir::new().unwrap();
    let spec = small_spec(tmp.path(), 3);
    let train = tmp.path().join("train");
    assert!(run(&["train", "--config", s(&spec), "--out", s(&train)]).status.success());
    let out_dir = tmp.path().join("commits");
    let out = run(&[
        "commit-eval",
        "--config",
        s(&spec),
        "--checkpoint",
        s(&train.join("model.ckpt")),
        "--out",
        s(&out_dir),
    ]);
    assert!(out.status.success());
    let md = fs::read_to_string(out_dir.join("commit_eval.md")).unwrap();
    let header = md.lines().next().unwrap();
    assert_eq!(header, "| commit | size | hawkeye | random | untrained |");
    assert!(md.contains("| Avg. |") && md.contains("| Success rate |"));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let spec = small_spec(tmp.path(), 1);

    // Unknown config field.
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"budgets": 5}"#).unwrap();
    assert_eq!(run(&["baseline", "--config", s(&bad), "--out", s(tmp.path())]).status.code(), Some(2));

    // Unknown verb or flag.
    assert_eq!(run(&["explode"]).status.code(), Some(2));

    // Hawkeye without a checkpoint.
    assert_eq!(run(&["evaluate", "--config", s(&spec), "--out", s(tmp.path())]).status.code(), Some(2));

    // Checkpoint from a different app.
    let other = small_spec(tmp.path(), 5);
    let t = tmp.path().join("t5");
    assert!(run(&["train", "--config", s(&other), "--out", s(&t)]).status.success());
    let out = run(&["evaluate", "--config", s(&spec), "--checkpoint", s(&t.join("model.ckpt")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    // Output location that cannot be a directory.
    let file = tmp.path().join("plain");
    fs::write(&file, "x").unwrap();
    assert_eq!(run(&["baseline", "--config", s(&spec), "--out", s(&file.join("sub"))]).status.code(), Some(3));
}

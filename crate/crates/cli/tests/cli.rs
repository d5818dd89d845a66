//! End-to-end checks of the `asplab` binary: run, gen-data, metrics, and
//! the machine-readable failure path.

use std::path::Path;
use std::process::Command;

fn asplab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_asplab"))
}

const TINY_CONFIG: &str = r#"
method = "sr"
acquisition = "margin"
budgets = [0, 4]
seeds = [1]

[dataset]
kind = "synthetic"
classes = 3
features = 4
n_source = 120
n_target = 50
shift_magnitude = 2.0

[model]
hidden = [8]

[train]
source_epochs = 10
source_learning_rate = 0.05
fine_tune_learning_rate = 0.05
batch_size = 16
min_epochs = 2
max_epochs = 4
patience = 1

[aspest]
rounds = 2
n_members = 2
initial_steps = 10
ckpt_steps = 5
ckpt_epochs = 1
self_train_epochs = 2
"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

#[test]
fn run_writes_results_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("out");
    let output = asplab()
        .args(["run"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_dir)
        .arg("--deterministic")
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    assert!(out_dir.join("results.json").exists());
    assert!(out_dir.join("summary.csv").exists());
    assert!(out_dir.join("curve_1_0.csv").exists());
    assert!(out_dir.join("rounds_1.jsonl").exists());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("AUACC"), "stdout: {stdout}");
}

#[test]
fn deterministic_reruns_reproduce_results_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let read_results = |out: &Path| -> String {
        let status = asplab()
            .args(["run"])
            .arg(&config)
            .arg("--out-dir")
            .arg(out)
            .arg("--deterministic")
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read_to_string(out.join("results.json")).unwrap()
    };
    let a = read_results(&dir.path().join("a"));
    let b = read_results(&dir.path().join("b"));
    assert_eq!(a, b, "results.json must be bit-identical across reruns");
}

#[test]
fn sweep_overrides_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("sweep");
    let output = asplab()
        .args(["sweep"])
        .arg(&config)
        .args(["--budgets", "0,8"])
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(out_dir.join("curve_1_8.csv").exists());
    assert!(!out_dir.join("curve_1_4.csv").exists());
}

#[test]
fn gen_data_materializes_splits_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("data");
    let output = asplab()
        .args(["gen-data"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(output.status.success());
    for name in ["train.csv", "val.csv", "test.csv", "manifest.json"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["test_indices"].as_array().unwrap().len(), 50);
}

#[test]
fn metrics_subcommand_evaluates_score_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    std::fs::write(
        &scores,
        "score,correct,selected\n0.9,1,0\n0.8,1,0\n0.6,0,0\n0.4,0,0\n",
    )
    .unwrap();
    let output = asplab().args(["metrics"]).arg(&scores).output().unwrap();
    assert!(output.status.success());
    let value: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("stdout is a JSON metric bundle");
    assert!((value["accuracy"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    // sweep points (cov, acc): (0,1) (.25,1) (.5,1) (.75,2/3) (1,.5);
    // trapezoid area = 41/48
    assert!((value["auacc"].as_f64().unwrap() - 41.0 / 48.0).abs() < 1e-12);
}

#[test]
fn failures_exit_nonzero_with_json_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "method = \"sr\"\n").unwrap();
    let output = asplab().args(["run"]).arg(&config).output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    let record: serde_json::Value = serde_json::from_str(stderr.trim().lines().last().unwrap())
        .expect("stderr carries a JSON error record");
    assert_eq!(record["kind"], "config");
    assert!(record["error"].as_str().unwrap().contains("config"));
}

#[test]
fn seeds_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("seeded");
    let status = asplab()
        .args(["run"])
        .arg(&config)
        .args(["--seeds", "7,8"])
        .arg("--out-dir")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("results.json")).unwrap())
            .unwrap();
    let seeds: Vec<u64> = record["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["seed"].as_u64().unwrap())
        .collect();
    assert!(seeds.contains(&7) && seeds.contains(&8));
    assert!(out_dir.join("rounds_7.jsonl").exists());
    assert!(out_dir.join("rounds_8.jsonl").exists());
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use histonet::scenegen::read_dataset;
use histonet::Model;
use tempfile::TempDir;

fn histonet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_histonet")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = histonet(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Small 16×16 dataset the tiny architecture trains on in milliseconds.
fn tiny_data(dir: &Path, name: &str, n: usize, seed: u64) {
    let (n, seed) = (n.to_string(), seed.to_string());
    ok(
        dir,
        &[
            "--seed", &seed, "--out", name, "gen", "--n", &n, "--size", "16", "--count-mean", "3", "--count-std", "1",
            "--area-mean", "12", "--area-std", "4",
        ],
    );
}

/// Every file under `root` except `run.json`, which records the output path.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.retain(|(p, _)| p != Path::new("run.json"));
    out.sort();
    out
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let t = TempDir::new().unwrap();
    let out = histonet(t.path(), &["train", "--bogus"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&histonet(t.path(), &["train", "--dsn", "maybe"])), 1);
    assert_eq!(code(&histonet(t.path(), &["--help"])), 0);
}

#[test]
fn gen_is_deterministic_and_writes_run_json() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["--seed", "7", "--out", "a", "gen", "--n", "10", "--preset", "desk"]);
    ok(t.path(), &["--seed", "7", "--out", "b", "gen", "--n", "10", "--preset", "desk"]);
    assert_eq!(tree(&t.path().join("a")), tree(&t.path().join("b")));
    let run: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("a/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 7);
    assert_eq!(run["params"]["n"], 10);
    assert_eq!(read_dataset(&t.path().join("a")).unwrap().len(), 10);
}

#[test]
fn gen_defaults_to_full_size_and_accepts_empty_sets() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["--out", "e", "gen", "--n", "0"]);
    let data = read_dataset(&t.path().join("e")).unwrap();
    assert!(data.is_empty());
    assert_eq!(data.config.width, 256);
    assert!(t.path().join("e/manifest.json").is_file());
}

#[test]
fn unwritable_output_is_a_data_error() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("file"), b"x").unwrap();
    let out = histonet(t.path(), &["--out", "file/sub", "gen", "--n", "1"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("c.json"), r#"{"n": 3, "size": 16, "seed": 5}"#).unwrap();
    ok(t.path(), &["--config", "c.json", "--out", "g", "gen", "--n", "2"]);
    let run: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("g/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 5);
    assert_eq!(run["params"]["n"], 2);
    assert_eq!(run["params"]["size"], 16);
    fs::write(t.path().join("bad.json"), r#"{"nn": 3}"#).unwrap();
    assert_eq!(code(&histonet(t.path(), &["--config", "bad.json", "--out", "h", "gen"])), 1);
}

#[test]
fn zero_epochs_checkpoints_the_initialization() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path(), "d", 4, 1);
    ok(t.path(), &["--seed", "9", "--out", "m", "train", "--data", "d", "--epochs", "0"]);
    let model = Model::load(&t.path().join("m/model.ckpt")).unwrap();
    let fresh = Model::build(model.config().clone(), 9).unwrap();
    assert_eq!(model.params(), fresh.params());
    assert_eq!(fs::read_to_string(t.path().join("m/train_log.jsonl")).unwrap(), "");
}

#[test]
fn dsn_logs_carry_side_losses() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path(), "d", 6, 2);
    ok(t.path(), &["--out", "m", "train", "--data", "d", "--epochs", "2", "--dsn", "on"]);
    let log = fs::read_to_string(t.path().join("m/train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for line in &lines {
        for key in ["l_count", "l_kl", "l_wl", "l_kl2", "l_wl2", "l_kl4", "l_wl4", "l_total"] {
            assert!(line["train"][key].is_number(), "missing {key} in {line}");
        }
    }
    ok(t.path(), &["--out", "p", "train", "--data", "d", "--epochs", "1"]);
    let plain = fs::read_to_string(t.path().join("p/train_log.jsonl")).unwrap();
    assert!(!plain.contains("l_kl2"));
}

#[test]
fn diverging_training_exits_numeric_and_keeps_a_checkpoint() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path(), "d", 8, 3);
    let out = histonet(t.path(), &["--out", "m", "train", "--data", "d", "--epochs", "5", "--lr", "1e300"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let model = Model::load(&t.path().join("m/model.ckpt")).unwrap();
    assert!(model.params().tensors().iter().all(|p| p.is_finite()));
}

#[test]
fn eval_writes_reports_and_well_formed_svgs() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path(), "d", 5, 4);
    ok(t.path(), &["--out", "m", "train", "--data", "d", "--epochs", "1"]);
    let stdout = ok(t.path(), &["--out", "e", "eval", "--data", "d", "--ckpt", "m/model.ckpt"]);
    assert!(stdout.starts_with("method,MAE,kld,wt_L1,isec,chi2,corr,bhatt\nHistoNet 8,"));
    let csv = fs::read_to_string(t.path().join("e/metrics.csv")).unwrap();
    assert_eq!(csv, stdout);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("e/metrics.json")).unwrap()).unwrap();
    assert_eq!(report["per_image"].as_array().unwrap().len(), 5);
    for i in 0..5 {
        let svg = fs::read_to_string(t.path().join(format!("e/svg/{i:06}.svg"))).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert!(doc.descendants().filter(|n| n.has_tag_name("rect")).count() >= 16);
    }
    let out = histonet(t.path(), &["--out", "x", "eval", "--data", "d", "--ckpt", "m/model.ckpt", "--bins", "16"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn average_baseline_on_its_training_set() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path(), "d", 12, 5);
    ok(t.path(), &["--out", "a", "eval", "--data", "d", "--baseline", "average", "--svg", "off"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("a/metrics.json")).unwrap()).unwrap();
    let data = read_dataset(&t.path().join("d")).unwrap();
    let counts: Vec<f64> = data.scenes.iter().map(|s| s.instances.len() as f64).collect();
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    let mad = counts.iter().map(|c| (c - mean).abs()).sum::<f64>() / counts.len() as f64;
    assert!((report["report"]["mae"].as_f64().unwrap() - mad).abs() < 1e-9);
    assert_eq!(report["method"], "Average");
    assert!(!t.path().join("a/svg").exists());
}

#[test]
fn ablation_uses_nested_subsets() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path(), "d", 8, 6);
    tiny_data(t.path(), "test", 4, 7);
    ok(t.path(), &["--out", "ab", "ablate", "--data", "d", "--test", "test", "--fractions", "0.25,0.5,1", "--epochs", "1"]);
    let rows: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("ab/ablation.json")).unwrap()).unwrap();
    let subsets: Vec<Vec<u64>> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["subset"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect())
        .collect();
    assert_eq!(subsets.iter().map(Vec::len).collect::<Vec<_>>(), [2, 4, 8]);
    assert!(subsets.windows(2).all(|w| w[0].iter().all(|i| w[1].contains(i))));
    let csv = fs::read_to_string(t.path().join("ab/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    for chart in ["mae_vs_fraction.svg", "kld_vs_fraction.svg"] {
        roxmltree::Document::parse(&fs::read_to_string(t.path().join("ab").join(chart)).unwrap()).unwrap();
    }
    let bad = histonet(t.path(), &["--out", "z", "ablate", "--data", "d", "--test", "test", "--fractions", "0,1"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn replay_reproduces_outputs_byte_for_byte() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path(), "d", 6, 8);
    ok(t.path(), &["--seed", "4", "--out", "m", "train", "--data", "d", "--epochs", "2", "--dsn", "on"]);
    ok(t.path(), &["--out", "r", "replay", "m/run.json"]);
    assert_eq!(tree(&t.path().join("m")), tree(&t.path().join("r")));
}

#[test]
fn predict_emits_json_and_charts() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path(), "d", 3, 9);
    ok(t.path(), &["--out", "m", "train", "--data", "d", "--epochs", "1"]);
    ok(t.path(), &["--out", "p", "predict", "--ckpt", "m/model.ckpt", "--image", "d/images/000001.pgm", "--data", "d"]);
    let preds: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("p/predictions.json")).unwrap()).unwrap();
    let preds = preds.as_array().unwrap();
    assert_eq!(preds.len(), 4);
    assert_eq!(preds[0]["output"]["hist"].as_array().unwrap().len(), 8);
    assert_eq!(preds[0]["output"], preds[2]["output"]);
    assert!(t.path().join("p/svg/000001.svg").is_file());
    assert_eq!(code(&histonet(t.path(), &["--out", "q", "predict", "--ckpt", "missing.ckpt", "--data", "d"])), 2);
}

#[test]
fn cellularity_freezes_the_network_during_head_training() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path(), "d", 6, 10);
    let plan = r#"[
        {"stage": 1, "epochs": 1, "dataset_dir": "d", "trainable": ["count_branch"]},
        {"stage": 2, "epochs": 1, "dataset_dir": "d", "trainable": ["all"]},
        {"stage": 3, "epochs": 2, "dataset_dir": "d", "trainable": ["head"]}
    ]"#;
    fs::write(t.path().join("plan.json"), plan).unwrap();
    ok(t.path(), &["--out", "c", "cellularity", "--plan", "plan.json", "--test", "d"]);
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("c/cellularity.json")).unwrap()).unwrap();
    assert_eq!(doc["network_frozen_during_head"], true);
    assert!(doc["evaluation"]["spearman"].is_number());
    assert!(t.path().join("c/head.ckpt").is_file());
}

#[test]
fn gradcheck_command_passes() {
    let t = TempDir::new().unwrap();
    let stdout = ok(t.path(), &["--out", "g", "gradcheck", "--max-coords", "30"]);
    assert!(!stdout.contains("FAIL"));
    let results: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("g/gradcheck.json")).unwrap()).unwrap();
    assert!(results.as_array().unwrap().len() > 10);
}

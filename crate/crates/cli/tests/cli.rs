use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fraudgraph"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("synth_{n}_{seed}.csv"));
    let o = run(&["synth", "--n-transactions", &n.to_string(), "--seed", &seed.to_string(), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

const SMOKE: &str = r#"
[data]
inspection_rate = 0.2

[train]
pretrain_epochs = 1
finetune_epochs = 2
pretrain_anchors_per_epoch = 300
hidden = 8
batch_size = 64

[train.gbdt]
n_trees = 5
max_depth = 3
"#;

fn smoke_config(dir: &Path) -> PathBuf {
    let path = dir.join("smoke.toml");
    fs::write(&path, SMOKE).unwrap();
    path
}

fn train(dir: &Path, data: &Path, out: &Path, extra: &[&str]) -> Output {
    let cfg = smoke_config(dir);
    let mut args = vec!["train", "--data", p(data), "--config", p(&cfg), "--out-dir", p(out)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn synth_writes_file_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth(dir.path(), 500, 1);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 501);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.with_extension("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["n_transactions"], 500);
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn synth_is_reproducible_from_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = fs::read(synth(dir.path(), 300, 4)).unwrap();
    let other = tempfile::tempdir().unwrap();
    let b = fs::read(synth(other.path(), 300, 4)).unwrap();
    let c = fs::read(synth(dir.path(), 300, 5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn synth_rejects_bad_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let o = run(&["synth", "--base-illicit-rate", "1.5", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("base_illicit_rate"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn synth_config_file_and_set_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    fs::write(&cfg, "n_transactions = 100\nseed = 9\n").unwrap();
    let out = dir.path().join("d.csv");
    let o = run(&["synth", "--config", p(&cfg), "--set", "n_transactions=120", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 121);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.csv");
    let o = run(&["synth", "--set", "n_transaction=120", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_missing_csv_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &dir.path().join("absent.csv"), &dir.path().join("run"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("does not exist"));
}

#[test]
fn train_rejects_bad_inspection_rate() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 200, 0);
    let o = train(dir.path(), &data, &dir.path().join("run"), &["--inspection-rate", "1.5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("inspection_rate"));
}

#[test]
fn malformed_csv_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "txn_id,date\nt1,2020-01-01\n").unwrap();
    let o = train(dir.path(), &data, &dir.path().join("run"), &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

/// Smoke run on 2000 synthetic transactions, followed by eval and export.
#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2000, 2);
    let run_dir = dir.path().join("run");
    let o = train(dir.path(), &data, &run_dir, &["--variant", "sparse", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["params.bin", "params.json", "pipeline.json", "ensemble.json", "config.toml", "curves.csv", "report.json", "manifest.json"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["label"], "sparse");
    assert_eq!(manifest["config"]["train"]["variant"], "sparse");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["inputs"][0]["git_sha1"].as_str().unwrap().len(), 40);

    let report = dir.path().join("eval.json");
    let o = run(&["eval", "--checkpoint", p(&run_dir), "--data", p(&data), "--at", "1,5", "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let fractions: Vec<f64> = r["metrics"].as_array().unwrap().iter().map(|m| m["fraction"].as_f64().unwrap()).collect();
    assert_eq!(fractions, vec![0.01, 0.05]);
    // re-scoring the trained model reproduces the training report
    let trained: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    let at5 = trained["metrics"].as_array().unwrap().iter().find(|m| m["fraction"] == 0.05).unwrap();
    assert_eq!(at5["recall"], r["metrics"][1]["recall"]);

    let inductive = dir.path().join("unseen.json");
    let o = run(&[
        "eval", "--checkpoint", p(&run_dir), "--data", p(&data), "--unseen", "importer", "--out", p(&inductive),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&inductive).unwrap()).unwrap();
    assert_eq!(r["osr"][0]["key"], "importer");

    let emb = dir.path().join("emb.csv");
    let o = run(&["export-embeddings", "--checkpoint", p(&run_dir), "--data", p(&data), "--limit", "50", "--out", p(&emb)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&emb).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().all(|r| r.split(',').count() == 9));
}

#[test]
fn train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1500, 6);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train(dir.path(), &data, &a, &[])), 0);
    assert_eq!(code(&train(dir.path(), &data, &b, &[])), 0);
    for f in ["params.bin", "params.json", "pipeline.json", "ensemble.json", "report.json", "curves.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1500, 7);
    let run_dir = dir.path().join("run");
    assert_eq!(code(&train(dir.path(), &data, &run_dir, &[])), 0);
    let blob = run_dir.join("params.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[3] ^= 0xff;
    fs::write(&blob, bytes).unwrap();
    let o = run(&["eval", "--checkpoint", p(&run_dir), "--data", p(&data), "--out", p(&dir.path().join("r.json"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("checksum"));
}

#[test]
fn graph_grid_lists_six_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "--data", "unused.csv", "--grid", "graphs", "--dry-run", "--out-dir", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.contains(&"Q(G_L)+F(G_L) seed=0".to_string()));
    assert!(lines.contains(&"Q(G_U)+F(G) seed=0".to_string()));
}

#[test]
fn ablation_lists_five_variants() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["ablate", "--data", "unused.csv", "--seeds", "1", "--dry-run", "--out-dir", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let labels: Vec<String> = stdout(&o).lines().map(|l| l.split(' ').next().unwrap().to_string()).collect();
    assert_eq!(labels, ["full", "semi", "joint", "only", "sparse"]);
}

#[test]
fn empty_sweep_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 200, 0);
    let o = run(&["sweep", "--data", p(&data), "--out-dir", p(dir.path())]);
    assert_eq!(code(&o), 2);
    let o = run(&["sweep", "--data", p(&data), "--rates", "", "--out-dir", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_writes_cells_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1500, 8);
    let cfg = smoke_config(dir.path());
    let out = dir.path().join("sweep");
    let o = run(&["sweep", "--data", p(&data), "--config", p(&cfg), "--rates", "0.2,0.5", "--out-dir", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cells = fs::read_to_string(out.join("cells.csv")).unwrap();
    // header plus 5 fractions for each of the 2 rates
    assert_eq!(cells.lines().count(), 11);
    assert!(out.join("manifest.json").is_file());
}

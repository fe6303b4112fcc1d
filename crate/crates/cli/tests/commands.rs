use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use disc_core::graphdata::load_dataset;
use serde_json::Value;
use tempfile::TempDir;

fn disc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = disc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_data(dir: &Path, name: &str, classes: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&[
        "gen-data",
        "--bias",
        "0.9",
        "--classes",
        classes,
        "--train",
        "40",
        "--val",
        "12",
        "--test",
        "12",
        "--nodes",
        "16",
        "--knn",
        "4",
        "--seed",
        seed,
        "--out",
        p(&out),
    ]);
    out
}

const SMALL: [&str; 8] = [
    "--batch-size",
    "16",
    "--hidden",
    "8",
    "--layers",
    "2",
    "--masker-hidden",
    "4",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--seed", "3"];
    args.extend(SMALL);
    args.extend(extra);
    PathBuf::from(ok(&args)["run_dir"].as_str().unwrap())
}

#[test]
fn gen_data_is_reproducible_and_needs_out() {
    let dir = TempDir::new().unwrap();
    let a = tiny_data(dir.path(), "a", "4", "7");
    let b = tiny_data(dir.path(), "b", "4", "7");
    let names = [
        "manifest.json",
        "train.jsonl",
        "val.jsonl",
        "test_biased.jsonl",
        "test_unbiased.jsonl",
        "test_unseen.jsonl",
    ];
    for f in names {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(load_dataset(a.join("train.jsonl")).unwrap().len(), 40);
    let c = tiny_data(dir.path(), "c", "4", "8");
    assert_ne!(
        std::fs::read(a.join("train.jsonl")).unwrap(),
        std::fs::read(c.join("train.jsonl")).unwrap()
    );

    let missing = disc(&["gen-data", "--bias", "0.9"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--out"));
    assert_eq!(
        disc(&["gen-data", "--out", "x", "--colour", "red"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        disc(&[
            "gen-data",
            "--out",
            p(&dir.path().join("bad")),
            "--bias",
            "1.5"
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(disc(&["--help"]).status.code(), Some(0));
    assert_eq!(disc(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn config_file_merges_under_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[data]\nnum_classes = 3\nnodes_per_graph = 16\nknn_k = 4\n[data.sizes]\ntrain = 10\nval = 4\ntest_biased = 4\ntest_unbiased = 4\ntest_unseen = 4\n[train]\nq = 0.5\nepochs = 1\n").unwrap();
    let data = dir.path().join("d");
    ok(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--train",
        "12",
        "--out",
        p(&data),
    ]);
    let m: Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m["spec"]["num_classes"], 3);
    assert_eq!(m["splits"]["train"]["size"], 12);
    assert_eq!(m["splits"]["val"]["size"], 4);

    let run = train(
        &data,
        &dir.path().join("runs"),
        &["--config", p(&cfg), "--lambda-g", "2"],
    );
    let rc: Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(rc["train"]["q"], 0.5);
    assert_eq!(rc["train"]["lambda_g"], 2.0);
    assert_eq!(rc["train"]["epochs"], 1);
    assert_eq!(rc["train"]["t_gen"], 0);

    std::fs::write(&cfg, "[train]\nq = 0.5\nwarmup = 3\n").unwrap();
    let out = disc(&["train", "--data", p(&data), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup"));
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = tiny_data(dir.path(), "d", "4", "1");
    let run = train(&data, &dir.path().join("runs"), &["--epochs", "0"]);
    assert_eq!(
        std::fs::read_to_string(run.join("metrics.csv")).unwrap(),
        "epoch,L_D,L_G,total,train_acc,val_acc,wall_seconds\n"
    );
    let ck: Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("checkpoint.json")).unwrap())
            .unwrap();
    assert_eq!(ck["epoch"], 0);
    assert!(run
        .file_name()
        .unwrap()
        .to_str()
        .unwrap()
        .ends_with("-seed3"));
    // A second fresh run into the same directory is refused.
    let runs = dir.path().join("runs");
    let mut args = vec![
        "train",
        "--data",
        p(&data),
        "--out",
        p(&runs),
        "--seed",
        "3",
        "--epochs",
        "0",
    ];
    args.extend(SMALL);
    assert_eq!(disc(&args).status.code(), Some(2));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let data = tiny_data(dir.path(), "d", "4", "2");
    let full = train(
        &data,
        &dir.path().join("full"),
        &["--epochs", "4", "--t-gen", "2"],
    );
    let half = train(
        &data,
        &dir.path().join("half"),
        &["--epochs", "2", "--t-gen", "2"],
    );
    assert_eq!(
        std::fs::read_to_string(half.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    let mut args = vec![
        "train",
        "--data",
        p(&data),
        "--seed",
        "3",
        "--epochs",
        "4",
        "--t-gen",
        "2",
        "--resume",
        p(&half),
    ];
    args.extend(SMALL);
    ok(&args);
    assert_eq!(
        std::fs::read(full.join("metrics.csv")).unwrap(),
        std::fs::read(half.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(full.join("checkpoint.json")).unwrap(),
        std::fs::read(half.join("checkpoint.json")).unwrap()
    );

    let mut bad = vec![
        "train",
        "--data",
        p(&data),
        "--seed",
        "3",
        "--epochs",
        "6",
        "--t-gen",
        "2",
        "--q",
        "0.5",
        "--resume",
        p(&half),
    ];
    bad.extend(SMALL);
    let out = disc(&bad);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash mismatch"));
    let mut bad_seed = vec![
        "train",
        "--data",
        p(&data),
        "--seed",
        "4",
        "--epochs",
        "6",
        "--t-gen",
        "2",
        "--resume",
        p(&half),
    ];
    bad_seed.extend(SMALL);
    assert_eq!(disc(&bad_seed).status.code(), Some(2));
}

#[test]
fn eval_export_and_prune() {
    let dir = TempDir::new().unwrap();
    let data = tiny_data(dir.path(), "d", "4", "5");
    let run = train(
        &data,
        &dir.path().join("runs"),
        &["--epochs", "2", "--t-gen", "1"],
    );

    let report = ok(&["eval", "--checkpoint", p(&run), "--data", p(&data)]);
    for s in [
        "train",
        "val",
        "test_biased",
        "test_unbiased",
        "test_unseen",
    ] {
        let a = report["accuracy"][s].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&a));
    }
    assert!(report["mask_auc"].is_f64());
    let again = ok(&[
        "eval",
        "--checkpoint",
        p(&run.join("checkpoint.json")),
        "--data",
        p(&data),
    ]);
    assert_eq!(report, again);
    assert_eq!(
        disc(&[
            "eval",
            "--checkpoint",
            p(&run),
            "--data",
            p(&data),
            "--split",
            "nope"
        ])
        .status
        .code(),
        Some(1)
    );

    let masks = dir.path().join("masks.jsonl");
    let r = ok(&[
        "export-masks",
        "--checkpoint",
        p(&run),
        "--data",
        p(&data),
        "--split",
        "test_unbiased",
        "--out",
        p(&masks),
    ]);
    assert_eq!(r["records"], 12);
    let graphs = load_dataset(data.join("test_unbiased.jsonl")).unwrap();
    let lines: Vec<Value> = std::fs::read_to_string(&masks)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), graphs.len());
    for (rec, g) in lines.iter().zip(&graphs) {
        assert_eq!(rec["id"].as_str().unwrap(), g.id);
        assert_eq!(rec["c"].as_array().unwrap().len(), g.num_edges());
        assert_eq!(rec["b"].as_array().unwrap().len(), g.num_edges());
    }
    let emb = dir.path().join("emb.jsonl");
    let r = ok(&[
        "export-embeddings",
        "--checkpoint",
        p(&run),
        "--data",
        p(&data),
        "--split",
        "train",
        "--out",
        p(&emb),
    ]);
    assert_eq!(r["records"], 40);
    assert_eq!(
        disc(&["export-masks", "--checkpoint", p(&run), "--data", p(&data)])
            .status
            .code(),
        Some(1)
    );

    let pruned = dir.path().join("pruned");
    ok(&[
        "prune",
        "--checkpoint",
        p(&run),
        "--data",
        p(&data),
        "--fraction",
        "0.4",
        "--out",
        p(&pruned),
    ]);
    for s in [
        "train",
        "val",
        "test_biased",
        "test_unbiased",
        "test_unseen",
    ] {
        let before = load_dataset(data.join(format!("{s}.jsonl"))).unwrap();
        let after = load_dataset(pruned.join(format!("{s}.jsonl"))).unwrap();
        assert_eq!(before.len(), after.len());
        for (b, a) in before.iter().zip(&after) {
            let lost = b.num_edges() - a.num_edges();
            assert_eq!(
                lost,
                (0.4 * b.num_edges() as f64 + 1e-9).floor() as usize,
                "{}",
                b.id
            );
            assert_eq!(a.edge_weight.as_ref().unwrap().len(), a.num_edges());
        }
    }
    // The pruned directory is itself a dataset.
    ok(&[
        "eval",
        "--checkpoint",
        p(&run),
        "--data",
        p(&pruned),
        "--split",
        "test_unbiased",
    ]);
    assert_eq!(
        disc(&[
            "prune",
            "--checkpoint",
            p(&run),
            "--data",
            p(&data),
            "--fraction",
            "1.5",
            "--out",
            p(&pruned)
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn schema_mismatch_names_the_dimensions() {
    let dir = TempDir::new().unwrap();
    let three = tiny_data(dir.path(), "three", "3", "1");
    let four = tiny_data(dir.path(), "four", "4", "1");
    let run = train(&three, &dir.path().join("runs"), &["--epochs", "0"]);
    let out = disc(&["eval", "--checkpoint", p(&run), "--data", p(&four)]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(
        msg.contains("3 classes") && msg.contains("label 3"),
        "{msg}"
    );
}

#[test]
fn memorising_model_scores_one_on_train() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d");
    ok(&[
        "gen-data",
        "--classes",
        "2",
        "--train",
        "8",
        "--val",
        "0",
        "--test",
        "4",
        "--nodes",
        "16",
        "--knn",
        "4",
        "--seed",
        "1",
        "--out",
        p(&data),
    ]);
    let runs = dir.path().join("runs");
    let args = [
        "train",
        "--data",
        p(&data),
        "--out",
        p(&runs),
        "--mode",
        "vanilla",
        "--epochs",
        "150",
        "--lr",
        "0.02",
        "--batch-size",
        "8",
        "--hidden",
        "16",
        "--layers",
        "2",
    ];
    let run = PathBuf::from(ok(&args)["run_dir"].as_str().unwrap());
    let report = ok(&[
        "eval",
        "--checkpoint",
        p(&run),
        "--data",
        p(&data),
        "--split",
        "train",
    ]);
    assert_eq!(report["accuracy"]["train"], 1.0);
    assert!(report["mask_auc"].is_null());
}

#[test]
fn transfer_reports_every_level() {
    let dir = TempDir::new().unwrap();
    let data = tiny_data(dir.path(), "d", "4", "6");
    let run = train(
        &data,
        &dir.path().join("runs"),
        &["--epochs", "1", "--t-gen", "1"],
    );
    let csv = dir.path().join("t.csv");
    let mut args = vec![
        "transfer",
        "--checkpoint",
        p(&run),
        "--data",
        p(&data),
        "--fractions",
        "0,0.4",
        "--epochs",
        "1",
        "--out",
        p(&csv),
    ];
    args.extend(SMALL);
    let r = ok(&args);
    let rows = r["rows"].as_array().unwrap();
    let levels: Vec<&str> = rows.iter().map(|r| r["level"].as_str().unwrap()).collect();
    assert_eq!(levels, ["original", "prune0", "prune40"]);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
}

#[test]
fn gradcheck_passes_and_catches_a_fault() {
    let out = disc(&["gradcheck"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("gce_identity") && text.contains("op/propagate"));
    assert!(!text.contains("FAIL"));
    let bad = disc(&["gradcheck", "--inject-fault", "matmul"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
    assert_eq!(
        disc(&["gradcheck", "--inject-fault", "nosuchop"])
            .status
            .code(),
        Some(1)
    );
}

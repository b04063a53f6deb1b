use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn usda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usda"))
        .current_dir(dir)
        .env_remove("USDA_DATA_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = usda(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = "\
[data]
ratios = [4, 1, 1]
[model.encoder]
token_dim = 8
hidden_dim = 8
ffn_dim = 16
heads = 2
dialogue_layers = 1
[train]
max_epochs = 3
";

#[test]
fn missing_required_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = usda(dir.path(), &["eval", "--data", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(usda(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        usda(dir.path(), &["train", "--out", "o", "--mode", "both"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn runtime_failure_is_one_line_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = usda(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "missing.json",
            "--data",
            "missing.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("usda: error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    fs::write(
        dir.path().join("bad.toml"),
        "[train]\nlearning_rate = -1.0\n",
    )
    .unwrap();
    ok(
        dir.path(),
        &["gen-synthetic", "--out", "c.jsonl", "--size", "30"],
    );
    let out = usda(
        dir.path(),
        &[
            "train", "--config", "bad.toml", "--data", "c.jsonl", "--out", "o",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning rate"));
}

#[test]
fn synthetic_corpus_is_seeded_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["gen-synthetic", "--out", "a.jsonl", "--seed", "5"],
    );
    ok(
        dir.path(),
        &["gen-synthetic", "--out", "b.jsonl", "--seed", "5"],
    );
    ok(
        dir.path(),
        &["gen-synthetic", "--out", "c.jsonl", "--seed", "6"],
    );
    let a = fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_ne!(a, fs::read(dir.path().join("c.jsonl")).unwrap());

    let file = usda::corpus::read_dialogues(&dir.path().join("a.jsonl")).unwrap();
    assert_eq!(file.dialogues.len(), 500);
    assert_eq!(file.da_vocab.unwrap().len(), 8);
    let mut counts = [0usize; 3];
    for d in &file.dialogues {
        counts[d.satisfaction.index()] += 1;
    }
    for c in counts {
        let share = c as f64 / 500.0;
        assert!((share - 1.0 / 3.0).abs() <= 0.1, "{counts:?}");
    }
    let m = json(&dir.path().join("a.jsonl.manifest.json"));
    assert_eq!(m["command"], "gen-synthetic");
    assert_eq!(m["seed"], 5);
}

#[test]
fn full_pipeline_with_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("train.toml"), SMALL).unwrap();
    fs::write(
        d.join("pre.toml"),
        "[encoder]\ntoken_dim = 8\nhidden_dim = 8\nffn_dim = 16\nheads = 2\ndialogue_layers = 1\n[pretrain]\nepochs = 1\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "gen-synthetic",
            "--out",
            "corpus.jsonl",
            "--size",
            "60",
            "--seed",
            "2",
        ],
    );
    ok(
        d,
        &[
            "gen-pretrain",
            "--data",
            "corpus.jsonl",
            "--out",
            "samples.jsonl",
            "--tasks",
            "srs,did",
            "--neg-ratio",
            "1",
        ],
    );
    let samples = fs::read_to_string(d.join("samples.jsonl")).unwrap();
    assert!(samples.lines().count() > 0);
    for (i, line) in samples.lines().enumerate() {
        usda::pretrain::PretrainSample::from_json(line, i + 1).unwrap();
    }
    ok(
        d,
        &[
            "pretrain",
            "--config",
            "pre.toml",
            "--data",
            "samples.jsonl",
            "--out",
            "pre",
        ],
    );
    let stdout = ok(
        d,
        &[
            "train",
            "--config",
            "train.toml",
            "--data",
            "corpus.jsonl",
            "--init-from",
            "pre/pretrain.json",
            "--out",
            "run",
            "--epochs",
            "2",
        ],
    );
    assert!(stdout.contains("USE\tacc="));

    let metrics = json(&d.join("run/metrics.json"));
    assert_eq!(metrics["manifest"], "manifest.json");
    assert_eq!(
        metrics["history"].as_array().unwrap().len(),
        2,
        "flag overrides the file"
    );
    assert_eq!(json(&d.join("run/model.json"))["manifest"], "manifest.json");
    let manifest = json(&d.join("run/manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["lineage"][0]["role"], "pretrain");
    assert!(manifest["lineage"][0]["manifest"]
        .as_str()
        .unwrap()
        .ends_with("manifest.json"));
    assert_eq!(
        manifest["data"][0]["sha256"].as_str().unwrap(),
        usda_file_hash(&d.join("corpus.jsonl"))
    );

    ok(
        d,
        &[
            "eval",
            "--checkpoint",
            "run/model.json",
            "--data",
            "corpus.jsonl",
            "--out",
            "eval.json",
            "--traces",
            "tr.jsonl",
        ],
    );
    let eval = json(&d.join("eval.json"));
    assert_eq!(eval["manifest"], "eval.json.manifest.json");
    assert_eq!(eval["split"], "test");
    let split = json(&d.join("run/split.json"));
    assert_eq!(
        eval["report"]["num_dialogues"].as_u64().unwrap() as usize,
        split["test"].as_array().unwrap().len()
    );

    for (sub, extra) in [
        ("impact", vec!["--class", "0", "--min-support", "1"]),
        ("gates", vec!["--bins", "4"]),
        ("per-class", vec!["--num-da", "8"]),
    ] {
        let out = format!("{sub}.tsv");
        let mut args = vec![
            "analyze",
            sub,
            "--traces",
            "tr.jsonl",
            "--out",
            out.as_str(),
        ];
        args.extend(extra);
        ok(d, &args);
        let text = fs::read_to_string(d.join(&out)).unwrap();
        assert!(text.lines().count() >= 2, "{sub}: {text}");
    }
    let gates = fs::read_to_string(d.join("gates.tsv")).unwrap();
    let (_, histogram) = gates
        .split_once("\ngroup\tbin_low\tbin_high\tcount\n")
        .unwrap();
    assert_eq!(histogram.lines().count(), 4);

    ok(
        d,
        &[
            "analyze", "impact", "--traces", "tr.jsonl", "--class", "2", "--query", "99", "--out",
            "q.tsv",
        ],
    );
    assert!(fs::read_to_string(d.join("q.tsv"))
        .unwrap()
        .contains("absent"));

    ok(
        d,
        &[
            "analyze",
            "turns",
            "--checkpoint",
            "run/model.json",
            "--data",
            "corpus.jsonl",
            "--max-turns",
            "4",
            "--out",
            "turns.tsv",
        ],
    );
    assert_eq!(
        fs::read_to_string(d.join("turns.tsv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    ok(
        d,
        &[
            "train",
            "--config",
            "train.toml",
            "--data",
            "corpus.jsonl",
            "--mode",
            "clu",
            "--out",
            "clu",
        ],
    );
    ok(
        d,
        &[
            "analyze",
            "clusters",
            "--checkpoint",
            "clu/model.json",
            "--data",
            "corpus.jsonl",
            "--split",
            "all",
            "--out",
            "c.tsv",
        ],
    );
    assert!(fs::read_to_string(d.join("c.tsv"))
        .unwrap()
        .starts_with("cluster\tturns\trank\tword\tcount\n"));
}

fn usda_file_hash(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn data_dir_resolves_relative_paths() {
    let data = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    ok(
        data.path(),
        &["gen-synthetic", "--out", "corpus.jsonl", "--size", "40"],
    );
    let out = Command::new(env!("CARGO_BIN_EXE_usda"))
        .current_dir(work.path())
        .env("USDA_DATA_DIR", data.path())
        .args(["gen-pretrain", "--data", "corpus.jsonl", "--out", "s.jsonl"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(work.path().join("s.jsonl").exists());
}

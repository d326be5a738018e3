use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 14] = [
    "--set",
    "synthetic.rounds=2",
    "--set",
    "synthetic.n_candidates=4",
    "--set",
    "model.model_dim=16",
    "--set",
    "model.ff_dim=24",
    "--set",
    "model.pcr_hidden=8",
    "--set",
    "phase0.epochs=1",
    "--set",
    "phase1.epochs=1",
];

fn vdpcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdpcr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn succeed(args: &[&str]) -> Output {
    let out = vdpcr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY).collect()
}

/// Generates a tiny corpus and trains a one-epoch phase-0 model in `root`.
fn tiny_run(root: &Path) {
    let data = root.join("data");
    succeed(&with_tiny(&[
        "gen-synthetic",
        "--n",
        "12",
        "--val",
        "6",
        "--test",
        "6",
        "--seed",
        "3",
        "--out",
        p(&data),
    ]));
    succeed(&with_tiny(&[
        "train-phase0",
        "--train",
        p(&data.join("train.jsonl")),
        "--val",
        p(&data.join("val.jsonl")),
        "--seed",
        "3",
        "--out",
        p(&root.join("p0")),
    ]));
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn help_lists_every_command() {
    let out = succeed(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "gen-synthetic",
        "train-phase0",
        "pseudo-label",
        "analyze-heads",
        "train-phase1",
        "prune",
        "train-phase2",
        "evaluate",
        "ensemble",
        "resolve",
    ] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn gen_synthetic_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        succeed(&[
            "gen-synthetic",
            "--n",
            "100",
            "--seed",
            "7",
            "--out",
            p(out),
        ]);
    }
    let (x, y) = (
        fs::read(a.join("train.jsonl")).unwrap(),
        fs::read(b.join("train.jsonl")).unwrap(),
    );
    assert!(!x.is_empty());
    assert_eq!(x, y);
    assert_eq!(line_count(&a.join("train.jsonl")), 100);

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-synthetic");
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["config"].as_str().unwrap().contains("[phase0]"));
    assert!(
        manifest["finished_unix"].as_f64().unwrap() >= manifest["started_unix"].as_f64().unwrap()
    );
}

#[test]
fn unlabeled_split_has_no_gold_antecedents() {
    let dir = tempfile::tempdir().unwrap();
    succeed(&[
        "gen-synthetic",
        "--n",
        "20",
        "--unlabeled-fraction",
        "0.5",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(line_count(&dir.path().join("train.jsonl")), 10);
    let text = fs::read_to_string(dir.path().join("unlabeled.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 10);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let coref = v["coref"].as_array().cloned().unwrap_or_default();
        assert!(coref
            .iter()
            .all(|a| a["antecedents"].as_array().is_none_or(Vec::is_empty)));
    }
}

#[test]
fn evaluate_report_schema_does_not_depend_on_rule() {
    let dir = tempfile::tempdir().unwrap();
    tiny_run(dir.path());
    let ckpt = dir.path().join("p0/model.ckpt");
    let test = dir.path().join("data/test.jsonl");
    let mut keys = Vec::new();
    for rule in ["all", "crf+cap"] {
        let out = dir.path().join(rule.replace('+', "_"));
        succeed(&[
            "evaluate",
            "--checkpoint",
            p(&ckpt),
            "--corpus",
            p(&test),
            "--rule",
            rule,
            "--json",
            "--out",
            p(&out),
        ]);
        let report = fs::read_to_string(out.join("report.tsv")).unwrap();
        let rows: Vec<String> = report
            .lines()
            .map(|l| l.rsplit_once('\t').unwrap().0.to_string())
            .collect();
        assert!(rows.len() > 5);
        keys.push(rows);
        assert_eq!(line_count(&out.join("scores.jsonl")), 12);
        assert!(out.join("manifest.json").exists());
    }
    assert_eq!(keys[0], keys[1]);
}

#[test]
fn resolve_and_prune_cover_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    tiny_run(dir.path());
    let test = dir.path().join("data/test.jsonl");
    let out = dir.path().join("resolved");
    succeed(&[
        "resolve",
        "--checkpoint",
        p(&dir.path().join("p0/model.ckpt")),
        "--corpus",
        p(&test),
        "--out",
        p(&out),
    ]);
    assert_eq!(line_count(&out.join("resolved.jsonl")), 6);

    let out = dir.path().join("prune");
    succeed(&[
        "prune",
        "--corpus",
        p(&test),
        "--rule",
        "crf",
        "--out",
        p(&out),
    ]);
    let text = fs::read_to_string(out.join("prune.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert!(text.contains("\"crf\""));
}

#[test]
fn outputs_never_overwrite_inputs() {
    let dir = tempfile::tempdir().unwrap();
    tiny_run(dir.path());
    let out = dir.path().join("same");
    fs::create_dir_all(&out).unwrap();
    let corpus = out.join("resolved.jsonl");
    fs::copy(dir.path().join("data/test.jsonl"), &corpus).unwrap();
    let before = fs::read(&corpus).unwrap();
    let res = vdpcr(&[
        "resolve",
        "--checkpoint",
        p(&dir.path().join("p0/model.ckpt")),
        "--corpus",
        p(&corpus),
        "--out",
        p(&out),
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("overwrite"));
    assert_eq!(fs::read(&corpus).unwrap(), before);
}

#[test]
fn failures_exit_with_their_category() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let missing = dir.path().join("missing.jsonl");

    let res = vdpcr(&["prune", "--corpus", p(&missing), "--out", out]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("error[input]"));

    let res = vdpcr(&["gen-synthetic", "--n", "2", "--bogus", "--out", out]);
    assert!(!res.status.success());

    let res = vdpcr(&[
        "gen-synthetic",
        "--n",
        "2",
        "--set",
        "phase1.lr=-1",
        "--out",
        out,
    ]);
    assert_eq!(res.status.code(), Some(2));

    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    succeed(&["gen-synthetic", "--n", "2", "--out", out]);
    let res = vdpcr(&[
        "evaluate",
        "--checkpoint",
        p(&bad),
        "--corpus",
        p(&dir.path().join("train.jsonl")),
        "--out",
        out,
    ]);
    assert_eq!(res.status.code(), Some(5));
}

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TREES: &str = "\
(X0 (X1 a b) c)
(X1 a (X0 b c d))
(X0 d (X1 c) a)
(X1 (X0 a) (X0 b c))
(X0 b a)
(X1 c (X1 d a) b)
";

fn rnng(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rnng")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn text(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn keys(line: &str) -> Vec<String> {
    // serde_json keeps insertion order only with a feature, so read the
    // field names off the raw text.
    let v: Value = serde_json::from_str(line).unwrap();
    let mut found: Vec<(usize, String)> = v
        .as_object()
        .unwrap()
        .keys()
        .map(|k| (line.find(&format!("\"{k}\":")).unwrap(), k.clone()))
        .collect();
    found.sort();
    found.into_iter().map(|(_, k)| k).collect()
}

/// Trains a tiny model once per test that needs one.
fn trained(dir: &Path) -> String {
    std::fs::write(dir.join("trees.txt"), TREES).unwrap();
    let t = dir.join("trees.txt");
    let out = dir.join("run");
    let o = rnng(&[
        "train", "--train", t.to_str().unwrap(), "--dev", t.to_str().unwrap(), "--out", out.to_str().unwrap(), "--dim", "6",
        "--batch-size", "3", "--max-steps", "4", "--validate-every", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("best.ckpt").to_str().unwrap().to_string()
}

#[test]
fn oracle_on_the_two_tree_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("two.txt");
    std::fs::write(&p, "(S (NP the dog) (VP barks))\n(NP dog)\n").unwrap();
    let o = rnng(&["oracle", "--trees", p.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    let a: Value = serde_json::from_str(lines[0]).unwrap();
    let b: Value = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(a["actions"].as_array().unwrap().len(), 9);
    assert_eq!(a["actions"][5], "NT(VP)");
    assert_eq!((a["depth"].as_u64(), b["depth"].as_u64()), (Some(4), Some(2)));
    assert_eq!(b["actions"], serde_json::json!(["NT(NP)", "GEN(dog)", "REDUCE"]));
    assert_eq!(keys(lines[0]), ["id", "actions", "depth"]);
    assert_eq!(text(&dir.path().join("o"), "oracle.jsonl"), stdout);
}

#[test]
fn missing_checkpoint_is_a_data_error_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.txt");
    std::fs::write(&p, "a b\n").unwrap();
    let out = dir.path().join("out");
    let o = rnng(&["parse", "--checkpoint", "/nonexistent.ckpt", "--test", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    assert!(!out.exists());
}

#[test]
fn configuration_errors_exit_one() {
    assert_eq!(rnng(&["oracle", "--trees", "x", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(rnng(&["--precision", "16", "selfcheck"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.txt");
    std::fs::write(&t, TREES).unwrap();
    let t = t.to_str().unwrap();
    let o = rnng(&["train", "--train", t, "--dev", t, "--out", dir.path().join("o").to_str().unwrap(), "--lr", "-1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_treebank_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.txt");
    std::fs::write(&t, "(S (NP a)\n").unwrap();
    assert_eq!(rnng(&["oracle", "--trees", t.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn training_and_parsing_artifacts_are_schema_stable() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let run = dir.path().join("run");
    let metrics = text(&run, "metrics.csv");
    let mut rows = metrics.lines();
    assert_eq!(rows.next(), Some("step,wallclock_s,train_nll,dev_nll"));
    assert_eq!(rows.next().unwrap().split(',').next(), Some("0"));
    let echo: Value = serde_json::from_str(&text(&run, "config.json")).unwrap();
    assert_eq!(echo["invocation"]["seed"], 1);
    assert_eq!(echo["resolved"]["train"]["lr"], 0.001);
    assert_eq!(echo["resolved"]["model"]["hidden"], 6);

    let trees = dir.path().join("trees.txt");
    let out = dir.path().join("parse");
    let o = rnng(&["parse", "--checkpoint", &ckpt, "--test", trees.to_str().unwrap(), "--out", out.to_str().unwrap(), "--beam-k", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let parses = text(&out, "parses.jsonl");
    assert_eq!(parses.lines().count(), 6);
    assert_eq!(keys(parses.lines().next().unwrap()), ["id", "tree", "logp", "prefix_logp", "surprisal"]);
    let summary: Value = serde_json::from_str(&text(&out, "summary.json")).unwrap();
    assert!(summary["bracket"]["f1"].is_number());
    let echo: Value = serde_json::from_str(&text(&out, "config.json")).unwrap();
    assert_eq!((echo["resolved"]["beam"]["k_w"].as_u64(), echo["resolved"]["beam"]["k_s"].as_u64()), (Some(1), Some(1)));

    let out = dir.path().join("ppl");
    let o = rnng(&["ppl", "--checkpoint", &ckpt, "--test", trees.to_str().unwrap(), "--out", out.to_str().unwrap(), "--beam-k", "10"]);
    assert!(o.status.success());
    assert_eq!(text(&out, "ppl.csv").lines().next(), Some("id,tokens,logp,ppl"));
    let ppl: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    assert!(ppl > 1.0 && ppl.is_finite());

    let suite = dir.path().join("suite.jsonl");
    std::fs::write(&suite, r#"{"id": 1, "good": {"tokens": ["a", "b"], "critical": [1, 2]}, "bad": {"tokens": ["a", "c"], "critical": [1, 2]}}"#).unwrap();
    let out = dir.path().join("pairs");
    let o = rnng(&["pairs-eval", "--checkpoint", &ckpt, "--suite", suite.to_str().unwrap(), "--out", out.to_str().unwrap(), "--beam-k", "10"]);
    assert!(o.status.success());
    assert_eq!(keys(text(&out, "pairs.jsonl").lines().next().unwrap()), ["id", "good", "bad", "correct"]);
}

#[test]
fn runs_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, cb) = (trained(a.path()), trained(b.path()));
    assert_eq!(std::fs::read(&ca).unwrap(), std::fs::read(&cb).unwrap());
    // Everything but the wallclock column.
    let strip = |s: String| -> Vec<String> {
        s.lines()
            .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != 1).map(|(_, f)| f).collect::<Vec<_>>().join(","))
            .collect()
    };
    assert_eq!(strip(text(&a.path().join("run"), "metrics.csv")), strip(text(&b.path().join("run"), "metrics.csv")));
}

#[test]
fn benchmark_headers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bt");
    let o = rnng(&["bench-train", "--synthetic", "40", "--batch-sizes", "1,2", "--seeds", "1", "--sentences", "4", "--dim", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = text(&out, "bench_train.csv");
    assert_eq!(csv.lines().next(), Some("batch_size,sentences_per_sec,sd,seeds"));
    assert_eq!(csv.lines().count(), 3);

    let out = dir.path().join("bb");
    let o = rnng(&["bench-beam", "--synthetic", "2", "--beam-sizes", "10", "--batch-sizes", "1,2", "--dim", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = text(&out, "bench_beam.csv");
    assert_eq!(csv.lines().next(), Some("k,k_w,k_s,batch_size,sentences,sec_per_sentence"));
    assert!(csv.lines().nth(1).unwrap().starts_with("10,1,1,1,2,"));
}

#[test]
fn selfcheck_passes_and_names_a_corrupted_checkpoint() {
    for p in ["32", "64"] {
        let o = rnng(&["--precision", p, "selfcheck"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
        assert_eq!(String::from_utf8(o.stdout).unwrap().lines().filter(|l| l.starts_with("PASS")).count(), 3);
    }
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let bad = dir.path().join("bad.ckpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    for ext in ["vocab", "nts"] {
        std::fs::copy(format!("{ckpt}.{ext}"), format!("{}.{ext}", bad.display())).unwrap();
    }
    let o = rnng(&["selfcheck", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8(o.stdout).unwrap().contains("FAIL checkpoint"));
    let o = rnng(&["selfcheck", "--checkpoint", &ckpt]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
}

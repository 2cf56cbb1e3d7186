// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs of the `romelab` binary on a very small model.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use romelab::config::RunConfig;
use romelab::report::sha256_hex;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_romelab");

fn romelab(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = romelab(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// A generated world cut down to `cases` suite lines and a two-layer model.
fn small_world(dir: &Path, cases: usize) {
    ok(dir, &["gen-world", "--out", ".", "--seed", "5", "--bytes", "6000"]);
    let suite = std::fs::read_to_string(dir.join("suite.jsonl")).unwrap();
    let kept: String = suite.lines().take(cases).map(|l| format!("{l}\n")).collect();
    std::fs::write(dir.join("suite.jsonl"), kept).unwrap();
    let mut cfg = RunConfig::example("corpus.txt", "suite.jsonl", "out");
    cfg.seed = 5;
    cfg.model.n_layers = 2;
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.max_seq = 32;
    cfg.corpus.held_out_bytes = 256;
    cfg.train.steps = 4;
    cfg.train.seq_len = 32;
    cfg.train.batch_size = 2;
    cfg.covariance.max_samples = 500;
    cfg.prefixes.count = 3;
    cfg.prefixes.max_len = 4;
    cfg.value_search.steps = 3;
    std::fs::write(dir.join("romelab.toml"), cfg.to_toml().unwrap()).unwrap();
}

fn hashes(dir: &Path) -> BTreeMap<String, String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), sha256_hex(&std::fs::read(e.path()).unwrap()))
        })
        .collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn pipeline(dir: &Path) {
    let c = ["--config", "romelab.toml"];
    for cmd in ["train", "estimate-cov", "eval", "diagnose", "sweep"] {
        ok(dir, &[&[cmd][..], &c].concat());
    }
    ok(dir, &[&["edit"][..], &c, &["--case", "B-first", "--mode", "rome", "--prefix-test", "on"]].concat());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path(), 4);
    pipeline(dir.path());
    let first = hashes(&dir.path().join("out"));
    assert!(first.len() >= 15, "{first:?}");
    pipeline(dir.path());
    assert_eq!(hashes(&dir.path().join("out")), first);
}

#[test]
fn empty_suite_gives_empty_reports() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path(), 0);
    let c = ["--config", "romelab.toml"];
    for cmd in ["train", "estimate-cov", "eval", "diagnose", "sweep"] {
        ok(dir.path(), &[&[cmd][..], &c].concat());
    }
    let out = dir.path().join("out");
    let eval = json(&out.join("eval.json"));
    assert_eq!(eval["result"]["rows"], Value::Array(vec![]));
    assert_eq!(eval["result"]["aggregates"], Value::Array(vec![]));
    let diag = json(&out.join("diagnose.json"));
    assert_eq!(diag["result"]["denominators"], Value::Null);
    assert_eq!(diag["result"]["risks"], Value::Array(vec![]));
    let sweep = json(&out.join("sweep.json"));
    assert_eq!(sweep["result"].as_array().unwrap().len(), 2);
    assert_eq!(std::fs::read_to_string(out.join("eval.csv")).unwrap(), "");
}

#[test]
fn sweep_baseline_matches_single_edits() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path(), 4);
    let c = ["--config", "romelab.toml"];
    for cmd in ["train", "estimate-cov", "sweep"] {
        ok(dir.path(), &[&[cmd][..], &c].concat());
    }
    ok(dir.path(), &[&["eval"][..], &c, &["--mode", "rome"]].concat());
    let out = dir.path().join("out");
    let sweep = json(&out.join("sweep.json"));
    let rome = &sweep["result"][0];
    assert_eq!(rome["mode"], "rome_inconsistent");
    let baseline = &rome["variants"][0];
    assert_eq!(baseline["variant"], "baseline");
    let rows = baseline["table"]["rows"].as_array().unwrap();
    let eval = json(&out.join("eval.json"));
    let eval_rows = eval["result"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(eval_rows.len(), 4);
    for (s, e) in rows.iter().zip(eval_rows) {
        assert_eq!(s["case_id"], e["case_id"]);
        assert_eq!(s["ppl_after"], e["ppl_after"]);
        let id = s["case_id"].as_str().unwrap();
        ok(dir.path(), &[&["edit"][..], &c, &["--case", id, "--mode", "rome"]].concat());
        let single = json(&out.join(format!("edit-{id}.json")));
        assert_eq!(single["result"]["summary"]["denominator"], s["denominator"]);
        assert_eq!(single["result"]["evaluation"]["ppl_after"], s["ppl_after"]);
    }
}

#[test]
fn errors_are_json_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = romelab(dir.path(), &["eval", "--config", "missing.toml"]);
    assert!(!out.status.success());
    let record: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(record["error"], "io_error");

    small_world(dir.path(), 2);
    let text = std::fs::read_to_string(dir.path().join("romelab.toml")).unwrap();
    std::fs::write(dir.path().join("bad.toml"), text.replace("edited_layer = 0", "edited_layer = 9")).unwrap();
    let out = romelab(dir.path(), &["train", "--config", "bad.toml"]);
    let record: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(record["error"], "module_error");

    let out = romelab(dir.path(), &["eval", "--config", "romelab.toml"]);
    let record: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(record["error"], "io_error", "weights do not exist yet");
}

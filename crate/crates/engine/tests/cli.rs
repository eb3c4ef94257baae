//! The `glassgnn` binary end to end.

mod support;

use std::process::{Command, Output};

use support::{data_dir, trace_validator};

fn glassgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glassgnn"))
        .args(args)
        .arg("--bundle-dir")
        .arg(data_dir().join("bundles"))
        .env("GNN101_DATA_DIR", data_dir().join("datasets"))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn predict_writes_a_schema_valid_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    let o = glassgnn(&[
        "predict", "--model", "gcn", "--task", "graph", "--dataset", "mutag", "--graph-index", "0", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("predicted class"));

    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let errors: Vec<String> = trace_validator().iter_errors(&doc).map(|e| e.to_string()).take(3).collect();
    assert!(errors.is_empty(), "{errors:?}");
    let id = doc["trace_id"].as_str().unwrap();
    assert!(stdout.contains(id));

    let step = doc["layers"][0]["steps"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["symbol"] == "agg")
        .unwrap()["step_id"]
        .to_string();
    let o = Command::new(env!("CARGO_BIN_EXE_glassgnn"))
        .args(["provenance", "--trace", out.to_str().unwrap(), "--step", &step, "--cell", "0"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let prov: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!prov["terms"].as_array().unwrap().is_empty());
}

#[test]
fn self_link_exits_with_an_engine_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    let o = glassgnn(&[
        "predict", "--model", "gcn", "--task", "link", "--dataset", "twitch", "--edge", "5,5", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("InvalidTarget"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn missing_selector_names_the_flag() {
    let o = glassgnn(&["predict", "--model", "gat", "--task", "graph", "--dataset", "mutag", "--out", "unused.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--graph-index"), "{}", stderr(&o));

    let o = glassgnn(&["predict", "--model", "gat", "--task", "node", "--dataset", "karate", "--graph-index", "0", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--node"));
}

#[test]
fn malformed_flags_are_usage_errors() {
    let o = glassgnn(&["predict", "--model", "gin", "--task", "graph", "--dataset", "mutag", "--graph-index", "0", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--model"));

    let o = glassgnn(&["predict", "--model", "gcn", "--task", "link", "--dataset", "twitch", "--edge", "5", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--edge"));
}

#[test]
fn data_dir_comes_from_the_environment() {
    let o = Command::new(env!("CARGO_BIN_EXE_glassgnn"))
        .args(["datasets", "--bundle-dir"])
        .arg(data_dir().join("bundles"))
        .env("GNN101_DATA_DIR", "/nonexistent/datasets")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("/nonexistent/datasets"));

    let o = glassgnn(&["models"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let listing = String::from_utf8(o.stdout).unwrap();
    assert_eq!(listing.lines().count(), 9);
}

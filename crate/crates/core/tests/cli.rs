mod common;

use common::{cli, fixtures};
use serde_json::Value;

fn json(path: &std::path::Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cli(&[]), 2);
    assert_eq!(cli(&["frobnicate"]), 2);
    assert_eq!(cli(&["evaluate"]), 2);
    assert_eq!(cli(&["run", "--data", "x", "--model", "gpt4", "--task", "nope"]), 2);
    assert_eq!(cli(&["prepare", "--config", "a.toml", "--preset", "zs-binary-custom-gpt4", "--out", "x"]), 2);
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(cli(&["--help"]), 0);
    assert_eq!(cli(&["--version"]), 0);
}

#[test]
fn pipeline_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let m = missing.to_str().unwrap();
    assert_eq!(cli(&["evaluate", m, "--data", m]), 1);
    assert_eq!(cli(&["calibrate", m]), 1);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[split]\nsede = 3\n").unwrap();
    assert_eq!(cli(&["prepare", "--config", bad.to_str().unwrap(), "--out", m]), 1);
}

#[test]
fn prepare_writes_splits_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let config = fixtures().join("e2e.toml");
    assert_eq!(cli(&["prepare", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);

    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["ingested"], 60);
    assert_eq!(manifest["unlabeled"], 4);
    assert_eq!(manifest["too_short"], 1);
    assert_eq!(manifest["duplicates"], 2);

    let mut total = 0;
    let mut ids = std::collections::HashSet::new();
    for split in ["train", "validation", "test"] {
        let text = std::fs::read_to_string(out.join(format!("{split}.jsonl"))).unwrap();
        for line in text.lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            assert!(ids.insert(v["id"].as_str().unwrap().to_string()), "id in two splits");
            total += 1;
        }
    }
    assert_eq!(total, 60 - 4 - 1 - 2);
    // emails, URLs, handles and the footer are gone from the cleaned text
    let all = std::fs::read_to_string(out.join("messages.jsonl")).unwrap();
    let mut raw_urls = 0;
    for line in all.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let text = v["text"].as_str().unwrap();
        assert!(!text.contains("https://") && !text.contains("t.me/"), "{text}");
        raw_urls += v["raw_text"].as_str().unwrap().contains("https://") as usize;
    }
    assert!(raw_urls > 0);
}

#[test]
fn replay_miss_and_missing_key_fail() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    let config = fixtures().join("e2e.toml");
    let c = config.to_str().unwrap();
    assert_eq!(cli(&["prepare", "--config", c, "--out", d]), 0);

    // a fixture with nothing in it misses every digest
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let runs = dir.path().join("runs");
    let r = runs.to_str().unwrap();
    assert_eq!(cli(&["run", "--config", c, "--data", d, "--fixture", empty.to_str().unwrap(), "--outdir", r]), 1);

    if std::env::var_os("OPENAI_API_KEY").is_none() {
        assert_eq!(cli(&["run", "--config", c, "--data", d, "--outdir", r]), 1);
    }
}

#[test]
fn import_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    let config = fixtures().join("e2e.toml");
    assert_eq!(cli(&["prepare", "--config", config.to_str().unwrap(), "--out", d]), 0);

    let test = std::fs::read_to_string(data.join("test.jsonl")).unwrap();
    let mut rows = String::new();
    for line in test.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let gold = v["label"].as_str().unwrap() == "positive";
        rows.push_str(&format!("{{\"message_id\":{},\"label\":{gold}}}\n", v["id"]));
    }
    let file = dir.path().join("preds.jsonl");
    std::fs::write(&file, rows).unwrap();
    let runs = dir.path().join("runs");
    let args = ["import", file.to_str().unwrap(), "--data", d, "--outdir", runs.to_str().unwrap(), "--run-id", "oracle"];
    assert_eq!(cli(&args), 0);
    let run = runs.join("oracle");
    assert_eq!(cli(&["evaluate", run.to_str().unwrap(), "--data", d]), 0);
    let report = json(&run.join("report.json"));
    assert_eq!(report["accuracy"], 1.0);
    assert_eq!(report["macro_f1"], 1.0);
}

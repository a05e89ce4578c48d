#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ct_harness::parsers::{parse_binary, parse_few_shot_label, parse_probability, ParseStatus, Parsed, Verdict};
use ct_harness::Label;
use serde::Deserialize;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("resources/fixtures")
}

#[derive(Debug, Deserialize)]
pub struct NoisyCase {
    pub parser: String,
    pub raw: String,
    pub expected_verdict: serde_json::Value,
    pub expected_status: ParseStatus,
}

pub fn noisy_cases() -> Vec<NoisyCase> {
    let text = std::fs::read_to_string(fixtures().join("noisy_outputs.jsonl")).unwrap();
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn verdict_json(v: Option<Verdict>) -> serde_json::Value {
    match v {
        None => serde_json::Value::Null,
        Some(Verdict::Binary(Label::Positive)) => "positive".into(),
        Some(Verdict::Binary(Label::Negative)) => "negative".into(),
        Some(Verdict::Score(s)) => s.into(),
    }
}

/// Returns a description of the mismatch, if any.
pub fn check_noisy(case: &NoisyCase) -> Option<String> {
    let parsed: Parsed = match case.parser.as_str() {
        "binary" => parse_binary(&case.raw),
        "probability" => parse_probability(&case.raw),
        "few_shot" => parse_few_shot_label(&case.raw),
        other => return Some(format!("unknown parser {other}")),
    };
    let got = verdict_json(parsed.verdict);
    if got != case.expected_verdict || parsed.status != case.expected_status {
        Some(format!(
            "{} {:?}: got {got} {:?}, expected {} {:?}",
            case.parser, case.raw, parsed.status, case.expected_verdict, case.expected_status
        ))
    } else {
        None
    }
}

pub fn cli(args: &[&str]) -> i32 {
    let argv = std::iter::once("ct-harness").chain(args.iter().copied());
    ct_harness::cli::main_with_args(argv)
}

fn must(args: &[&str]) {
    assert_eq!(cli(args), 0, "ct-harness {}", args.join(" "));
}

pub const RUNS: [&str; 4] = [
    "zero-shot-probabilistic-custom-gpt4-validation",
    "zero-shot-probabilistic-custom-gpt4-test",
    "zero-shot-binary-custom-gpt4-test",
    "zero-shot-binary-custom-gpt35-test",
];

/// Full replay pipeline under `root`. Returns every report it wrote, as
/// (name relative to `root`, bytes), in a fixed order.
pub fn replay_pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let fx = fixtures();
    let config = fx.join("e2e.toml");
    let replay = fx.join("replay.jsonl");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = s(&root.join("data"));
    let runs = s(&root.join("runs"));
    let config = s(&config);
    let replay = s(&replay);
    let run = |id: &str| s(&root.join("runs").join(id));
    let cal = s(&root.join("calibration.json"));

    must(&["prepare", "--config", &config, "--out", &data]);
    must(&["sample", "--data", &data, "--out", &s(&root.join("data/fewshot_sets.json"))]);
    let base = ["run", "--config", &config, "--data", &data, "--fixture", &replay, "--outdir", &runs];
    let prob = ["--task", "zero-shot-probabilistic"];
    must(&[&base[..], &prob, &["--split", "validation"]].concat());
    must(&[&base[..], &prob].concat());
    must(&base);
    must(&[&base[..], &["--model", "gpt35"]].concat());
    must(&["calibrate", &run(RUNS[0]), "--data", &data, "--out", &cal]);
    must(&["evaluate", &run(RUNS[1]), "--data", &data, "--calibration", &cal]);
    must(&["evaluate", &run(RUNS[2]), "--data", &data]);
    must(&["evaluate", &run(RUNS[3]), "--data", &data]);
    must(&[
        "compare", &run(RUNS[2]), &run(RUNS[3]), "--data", &data, "--out", &s(&root.join("compare.json")),
    ]);
    must(&[
        "compare", &run(RUNS[1]), &run(RUNS[2]), "--calibration-a", &cal, "--data", &data, "--out",
        &s(&root.join("compare_prob.json")),
    ]);
    must(&[
        "analyze", &run(RUNS[1]), "--data", &data, "--calibration", &cal, "--min-messages", "1", "--csv",
        &s(&root.join("channels.csv")),
    ]);

    let mut names = vec![
        "data/train.jsonl".to_string(),
        "data/validation.jsonl".into(),
        "data/test.jsonl".into(),
        "data/fewshot_sets.json".into(),
        "calibration.json".into(),
        "compare.json".into(),
        "compare_prob.json".into(),
        "channels.csv".into(),
        format!("runs/{}/analysis.json", RUNS[1]),
    ];
    for id in RUNS {
        names.push(format!("runs/{id}/ledger.jsonl"));
        names.push(format!("runs/{id}/predictions.jsonl"));
    }
    for id in &RUNS[1..] {
        names.push(format!("runs/{id}/report.json"));
    }
    names
        .into_iter()
        .map(|n| {
            let bytes = std::fs::read(root.join(&n)).unwrap_or_else(|e| panic!("{n}: {e}"));
            (n, bytes)
        })
        .collect()
}

//! Chat-completion execution with decoding constraints, retries and a
//! replayable run ledger.
//!
//! Every request goes through a [`Transport`]. [`HttpTransport`] talks to an
//! OpenAI-compatible endpoint; [`ReplayTransport`] serves recorded outputs
//! from a ledger or a hand-written fixture.

mod ledger;
mod transport;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::parsers::{Prediction, Verdict};
use crate::prompt_kit::{Dialect, RenderedPrompt};
use crate::Label;

pub use ledger::{read_ledger, FixtureEntry, FixtureStatus, RunLedger};
pub use transport::{ChatRequest, Completion, HttpTransport, ReplayTransport, RetryPolicy, Transport, TransportError};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("replay miss for {} prompt digest(s): {}", .0.len(), .0.join(", "))]
    ReplayMiss(Vec<String>),
    #[error("dialect `{dialect}` does not support {capability}")]
    UnsupportedCapability { dialect: Dialect, capability: &'static str },
    #[error("allowed token set is empty")]
    EmptyTokenSet,
    #[error("no known token id for `{0}`")]
    UnknownToken(String),
    #[error("environment variable `{0}` with the API key is not set")]
    MissingApiKey(String),
    #[error("duplicate message id `{0}` in batch")]
    DuplicatePrompt(String),
    #[error("http client: {0}")]
    Http(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{} imported prediction(s) reference unknown message ids: {}", .0.len(), .0.join(", "))]
    UnknownIds(Vec<String>),
    #[error("{path}:{line}: probability {value} outside [0, 1]")]
    ScoreOutOfRange { path: PathBuf, line: usize, value: f64 },
    #[error("unknown model profile `{0}`")]
    UnknownProfile(String),
}

impl GatewayError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        GatewayError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Endpoint, model and decoding settings for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub endpoint: Url,
    pub model: String,
    pub dialect: Dialect,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub logit_bias: BTreeMap<u32, i32>,
    pub request_timeout_secs: u64,
    pub max_in_flight: usize,
    pub api_key_env: String,
}

const OPENAI_CHAT: &str = "https://api.openai.com/v1/chat/completions";
const LOCAL_CHAT: &str = "http://127.0.0.1:8000/v1/chat/completions";

impl ModelProfile {
    pub fn new(name: &str, endpoint: &str, model: &str, dialect: Dialect) -> Self {
        ModelProfile {
            name: name.to_string(),
            endpoint: Url::parse(endpoint).expect("valid endpoint url"),
            model: model.to_string(),
            dialect,
            temperature: Self::default_temperature(dialect),
            max_output_tokens: None,
            logit_bias: BTreeMap::new(),
            request_timeout_secs: 60,
            max_in_flight: 4,
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }

    pub fn default_temperature(dialect: Dialect) -> f64 {
        match dialect {
            Dialect::Gpt => 0.0,
            Dialect::Llama => 0.01,
        }
    }

    pub fn gpt35() -> Self {
        Self::new("gpt35", OPENAI_CHAT, "gpt-3.5-turbo-0613", Dialect::Gpt)
    }

    pub fn gpt4() -> Self {
        Self::new("gpt4", OPENAI_CHAT, "gpt-4-0613", Dialect::Gpt)
    }

    /// Llama 2 behind any OpenAI-compatible server; point `endpoint` at it.
    pub fn llama2() -> Self {
        let mut p = Self::new("llama2", LOCAL_CHAT, "llama-2-70b-chat", Dialect::Llama);
        p.api_key_env = "LLAMA_API_KEY".into();
        p
    }

    pub fn preset(name: &str) -> Result<Self, GatewayError> {
        match name {
            "gpt35" | "gpt-3.5" => Ok(Self::gpt35()),
            "gpt4" | "gpt-4" => Ok(Self::gpt4()),
            "llama2" | "llama-2" => Ok(Self::llama2()),
            other => Err(GatewayError::UnknownProfile(other.to_string())),
        }
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs(self.request_timeout_secs)
    }
}

/// Token ids of single-character digits in the GPT byte-pair vocabularies.
const DIGIT_TOKEN_IDS: [(&str, u32); 10] = [
    ("0", 15),
    ("1", 16),
    ("2", 17),
    ("3", 18),
    ("4", 19),
    ("5", 20),
    ("6", 21),
    ("7", 22),
    ("8", 23),
    ("9", 24),
];

pub fn token_id(token: &str) -> Option<u32> {
    DIGIT_TOKEN_IDS.iter().find(|(t, _)| *t == token).map(|&(_, id)| id)
}

/// Restricts `profile` to a single output token drawn from `allowed`
/// by setting `max_output_tokens = 1` and a +100 logit bias per token.
pub fn constrained_single_token<S: AsRef<str>>(profile: &ModelProfile, allowed: &[S]) -> Result<ModelProfile, GatewayError> {
    if profile.dialect == Dialect::Llama {
        return Err(GatewayError::UnsupportedCapability {
            dialect: profile.dialect,
            capability: "logit bias",
        });
    }
    if allowed.is_empty() {
        return Err(GatewayError::EmptyTokenSet);
    }
    let mut out = profile.clone();
    out.max_output_tokens = Some(1);
    for t in allowed {
        let id = token_id(t.as_ref()).ok_or_else(|| GatewayError::UnknownToken(t.as_ref().to_string()))?;
        out.logit_bias.insert(id, 100);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

impl std::ops::Add for TokenUsage {
    type Output = TokenUsage;
    fn add(self, o: TokenUsage) -> TokenUsage {
        TokenUsage {
            prompt: self.prompt + o.prompt,
            completion: self.completion + o.completion,
        }
    }
}

/// Outcome of one prompt. `raw_output` is stored verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub message_id: String,
    pub digest: String,
    pub raw_output: String,
    pub latency_ms: u64,
    pub token_usage: TokenUsage,
    pub attempt: u32,
    /// Transport error after exhausted retries; `raw_output` is empty then.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn total_usage(responses: &[ModelResponse]) -> TokenUsage {
    responses.iter().fold(TokenUsage::default(), |acc, r| acc + r.token_usage)
}

enum Outcome {
    Done(ModelResponse),
    Abort(GatewayError),
}

fn execute(prompt: &RenderedPrompt, digest: String, profile: &ModelProfile, transport: &dyn Transport, retry: &RetryPolicy) -> Outcome {
    let request = ChatRequest { profile, prompt, digest: &digest };
    let mut attempt = 0;
    loop {
        attempt += 1;
        let started = Instant::now();
        let result = transport.complete(&request);
        let measured = started.elapsed().as_millis() as u64;
        let failure = match result {
            Ok(c) => {
                return Outcome::Done(ModelResponse {
                    message_id: prompt.message_id.clone(),
                    digest,
                    raw_output: c.text,
                    latency_ms: c.latency_ms.unwrap_or(measured),
                    token_usage: c.usage,
                    attempt,
                    error: None,
                })
            }
            Err(TransportError::Auth(m)) => return Outcome::Abort(GatewayError::Auth(m)),
            Err(TransportError::ReplayMiss(d)) => return Outcome::Abort(GatewayError::ReplayMiss(vec![d])),
            Err(e) => e,
        };
        if !failure.is_transient() || attempt >= retry.max_attempts {
            return Outcome::Done(ModelResponse {
                message_id: prompt.message_id.clone(),
                digest,
                raw_output: String::new(),
                latency_ms: measured,
                token_usage: TokenUsage::default(),
                attempt,
                error: Some(failure.to_string()),
            });
        }
        std::thread::sleep(retry.delay(attempt, failure.retry_after()));
    }
}

/// Runs `prompts` with at most `profile.max_in_flight` requests outstanding.
///
/// Responses come back in prompt order. Each one is appended to `ledger`
/// (also in prompt order, by a single writer) before this returns. Items
/// whose retries are exhausted carry an `error`; an authentication failure
/// aborts the whole batch.
pub fn classify_batch(
    prompts: &[RenderedPrompt],
    profile: &ModelProfile,
    transport: &dyn Transport,
    ledger: &mut RunLedger,
    retry: &RetryPolicy,
) -> Result<Vec<ModelResponse>, GatewayError> {
    let mut seen = HashSet::new();
    for p in prompts {
        if !seen.insert(p.message_id.as_str()) {
            return Err(GatewayError::DuplicatePrompt(p.message_id.clone()));
        }
    }
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    let workers = profile.max_in_flight.clamp(1, prompts.len());
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let mut slots: Vec<Option<ModelResponse>> = vec![None; prompts.len()];
    let mut failure = None;

    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, Outcome)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, abort) = (&next, &abort);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(prompt) = prompts.get(i) else { break };
                let outcome = execute(prompt, prompt.digest(), profile, transport, retry);
                if matches!(outcome, Outcome::Abort(_)) {
                    abort.store(true, Ordering::SeqCst);
                }
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // single writer: append in prompt order as the prefix completes
        let mut written = 0;
        for (i, outcome) in rx {
            match outcome {
                Outcome::Done(r) => slots[i] = Some(r),
                Outcome::Abort(e) => {
                    failure.get_or_insert(e);
                    continue;
                }
            }
            while written < slots.len() {
                let Some(r) = &slots[written] else { break };
                if failure.is_none() {
                    if let Err(e) = ledger.append(r.clone()) {
                        failure = Some(e);
                        abort.store(true, Ordering::SeqCst);
                    }
                }
                written += 1;
            }
        }
    });

    if let Some(e) = failure {
        return Err(e);
    }
    Ok(slots.into_iter().map(|s| s.expect("every prompt completed")).collect())
}

/// Serves `prompts` from a recorded fixture. Every digest must be present.
pub fn replay(fixture: &Path, prompts: &[RenderedPrompt], ledger: &mut RunLedger) -> Result<Vec<ModelResponse>, GatewayError> {
    let transport = ReplayTransport::from_file(fixture)?;
    let missing: Vec<String> = prompts
        .iter()
        .map(RenderedPrompt::digest)
        .filter(|d| !transport.contains(d))
        .collect();
    if !missing.is_empty() {
        return Err(GatewayError::ReplayMiss(missing));
    }
    let profile = ledger.profile.clone();
    classify_batch(prompts, &profile, &transport, ledger, &RetryPolicy::immediate())
}

#[derive(Deserialize)]
struct ImportRow {
    message_id: serde_json::Value,
    #[serde(default)]
    label: Option<serde_json::Value>,
    #[serde(default)]
    score: Option<f64>,
}

fn import_label(v: &serde_json::Value) -> Option<Label> {
    use serde_json::Value;
    match v {
        Value::Bool(b) => Some(Label::from_bool(*b)),
        Value::Number(n) => match n.as_i64() {
            Some(1) => Some(Label::Positive),
            Some(0) => Some(Label::Negative),
            _ => None,
        },
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "1" | "positive" | "yes" | "true" => Some(Label::Positive),
            "0" | "negative" | "no" | "false" => Some(Label::Negative),
            _ => None,
        },
        _ => None,
    }
}

/// Reads external predictions (JSONL rows with `message_id` and either
/// `label` or `score`). With `known_ids`, every id must be among them.
pub fn import_predictions(path: &Path, known_ids: Option<&HashSet<String>>) -> Result<Vec<Prediction>, GatewayError> {
    let file = File::open(path).map_err(|e| GatewayError::io(path, e))?;
    let malformed = |line: usize, message: String| GatewayError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| GatewayError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ImportRow = serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        let id = match row.message_id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(malformed(line_no, format!("message_id must be a string, got {other}"))),
        };
        if !seen.insert(id.clone()) {
            return Err(malformed(line_no, format!("duplicate message_id `{id}`")));
        }
        let verdict = match (row.label, row.score) {
            (Some(_), Some(_)) => return Err(malformed(line_no, "both `label` and `score` given".into())),
            (None, None) => return Err(malformed(line_no, "needs `label` or `score`".into())),
            (Some(l), None) => Verdict::Binary(import_label(&l).ok_or_else(|| malformed(line_no, format!("unrecognised label {l}")))?),
            (None, Some(s)) => {
                if !(0.0..=1.0).contains(&s) {
                    return Err(GatewayError::ScoreOutOfRange {
                        path: path.to_path_buf(),
                        line: line_no,
                        value: s,
                    });
                }
                Verdict::Score(s)
            }
        };
        out.push(Prediction::imported(id, verdict));
    }
    if let Some(known) = known_ids {
        let unknown: Vec<String> = out
            .iter()
            .filter(|p| !known.contains(&p.message_id))
            .map(|p| p.message_id.clone())
            .collect();
        if !unknown.is_empty() {
            return Err(GatewayError::UnknownIds(unknown));
        }
    }
    Ok(out)
}

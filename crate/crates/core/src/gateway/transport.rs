use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::json;
use thiserror::Error;

use super::ledger::{read_fixture, FixtureEntry, FixtureStatus};
use super::{GatewayError, ModelProfile, TokenUsage};
use crate::prompt_kit::RenderedPrompt;

pub struct ChatRequest<'a> {
    pub profile: &'a ModelProfile,
    pub prompt: &'a RenderedPrompt,
    pub digest: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
    /// Recorded latency; `None` means measure wall-clock time.
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("server error: {0}")]
    Server(String),
    #[error("network: {0}")]
    Network(String),
    #[error("request rejected: {0}")]
    Client(String),
    #[error("authentication: {0}")]
    Auth(String),
    #[error("no recorded output for digest {0}")]
    ReplayMiss(String),
    #[error("recorded failure: {0}")]
    Recorded(String),
}

impl TransportError {
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            TransportError::RateLimited { .. } | TransportError::Server(_) | TransportError::Network(_)
        )
    }

    pub fn retry_after(&self) -> Option<Duration> {
        match self {
            TransportError::RateLimited { retry_after } => *retry_after,
            _ => None,
        }
    }
}

pub trait Transport: Sync {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<Completion, TransportError>;
}

/// Exponential backoff with multiplicative jitter in [0.5, 1.5).
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(2),
            max_delay: Duration::from_secs(120),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Same attempt budget, no waiting. For replay and tests.
    pub fn immediate() -> Self {
        RetryPolicy {
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            jitter: false,
            ..Self::default()
        }
    }

    /// Wait before attempt `attempt + 1`.
    pub fn delay(&self, attempt: u32, retry_after: Option<Duration>) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << (attempt.saturating_sub(1)).min(16));
        let mut d = exp.min(self.max_delay);
        if self.jitter {
            d = d.mul_f64(0.5 + rand::random::<f64>());
        }
        match retry_after {
            Some(server) if self.max_delay > Duration::ZERO => d.max(server.min(self.max_delay)),
            _ => d,
        }
    }
}

/// OpenAI-compatible chat-completion client.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    api_key: String,
}

impl HttpTransport {
    pub fn new(profile: &ModelProfile) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&profile.api_key_env).map_err(|_| GatewayError::MissingApiKey(profile.api_key_env.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(profile.request_timeout())
            .build()
            .map_err(|e| GatewayError::Http(e.to_string()))?;
        Ok(HttpTransport { client, api_key })
    }

    pub fn request_body(request: &ChatRequest<'_>) -> serde_json::Value {
        let p = request.profile;
        let mut body = json!({
            "model": p.model,
            "messages": [
                {"role": "system", "content": request.prompt.system},
                {"role": "user", "content": request.prompt.user},
            ],
            "temperature": p.temperature,
        });
        if let Some(max) = p.max_output_tokens {
            body["max_tokens"] = json!(max);
        }
        if !p.logit_bias.is_empty() {
            let bias: serde_json::Map<String, serde_json::Value> =
                p.logit_bias.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
            body["logit_bias"] = serde_json::Value::Object(bias);
        }
        body
    }
}

impl Transport for HttpTransport {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<Completion, TransportError> {
        let response = self
            .client
            .post(request.profile.endpoint.clone())
            .bearer_auth(&self.api_key)
            .json(&Self::request_body(request))
            .send()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = response.status();
        let retry_after = response
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let body = response.text().map_err(|e| TransportError::Network(e.to_string()))?;
        match status.as_u16() {
            200..=299 => {}
            401 | 403 => return Err(TransportError::Auth(format!("{status}: {body}"))),
            429 => return Err(TransportError::RateLimited { retry_after }),
            500..=599 => return Err(TransportError::Server(format!("{status}"))),
            _ => return Err(TransportError::Client(format!("{status}: {body}"))),
        }
        let v: serde_json::Value = serde_json::from_str(&body).map_err(|e| TransportError::Server(format!("invalid json: {e}")))?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| TransportError::Server("response without choices[0].message.content".into()))?
            .to_string();
        let usage = TokenUsage {
            prompt: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        Ok(Completion {
            text,
            usage,
            latency_ms: None,
        })
    }
}

/// Serves recorded outputs keyed by prompt digest. Each digest holds a
/// queue of scripted replies; the last one repeats once reached.
pub struct ReplayTransport {
    queues: Mutex<HashMap<String, VecDeque<FixtureEntry>>>,
    simulate_latency: bool,
}

impl ReplayTransport {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let mut queues: HashMap<String, VecDeque<FixtureEntry>> = HashMap::new();
        for e in entries {
            queues.entry(e.digest.clone()).or_default().push_back(e);
        }
        ReplayTransport {
            queues: Mutex::new(queues),
            simulate_latency: false,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        Ok(Self::new(read_fixture(path)?))
    }

    /// Sleep for each entry's recorded latency, so completion order follows it.
    pub fn with_simulated_latency(mut self, on: bool) -> Self {
        self.simulate_latency = on;
        self
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.queues.lock().expect("replay queue lock").contains_key(digest)
    }
}

impl Transport for ReplayTransport {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<Completion, TransportError> {
        let entry = {
            let mut queues = self.queues.lock().expect("replay queue lock");
            let queue = queues
                .get_mut(request.digest)
                .ok_or_else(|| TransportError::ReplayMiss(request.digest.to_string()))?;
            if queue.len() > 1 {
                queue.pop_front().expect("non-empty queue")
            } else {
                queue.front().cloned().ok_or_else(|| TransportError::ReplayMiss(request.digest.to_string()))?
            }
        };
        if self.simulate_latency {
            std::thread::sleep(Duration::from_millis(entry.latency_ms));
        }
        match entry.status {
            FixtureStatus::Ok => Ok(Completion {
                text: entry.raw_output.unwrap_or_default(),
                usage: entry.token_usage,
                latency_ms: Some(entry.latency_ms),
            }),
            FixtureStatus::RateLimited => Err(TransportError::RateLimited { retry_after: None }),
            FixtureStatus::ServerError => Err(TransportError::Server("recorded server error".into())),
            FixtureStatus::AuthError => Err(TransportError::Auth("recorded authentication failure".into())),
            FixtureStatus::Failed => Err(TransportError::Recorded(entry.error.unwrap_or_default())),
        }
    }
}

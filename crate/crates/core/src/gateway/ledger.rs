use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GatewayError, ModelProfile, ModelResponse, TokenUsage};
use crate::prompt_kit::PromptSpec;

/// Append-only record of a run. With a path, every entry is written as one
/// JSON line and flushed before `append` returns.
#[derive(Debug)]
pub struct RunLedger {
    pub run_id: String,
    pub profile: ModelProfile,
    pub spec: PromptSpec,
    entries: Vec<ModelResponse>,
    sink: Option<(PathBuf, File)>,
}

impl RunLedger {
    pub fn in_memory(run_id: &str, profile: ModelProfile, spec: PromptSpec) -> Self {
        RunLedger {
            run_id: run_id.to_string(),
            profile,
            spec,
            entries: Vec::new(),
            sink: None,
        }
    }

    /// Creates (or truncates) `path` as the ledger file.
    pub fn create(path: &Path, run_id: &str, profile: ModelProfile, spec: PromptSpec) -> Result<Self, GatewayError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| GatewayError::io(path, e))?;
        let mut ledger = Self::in_memory(run_id, profile, spec);
        ledger.sink = Some((path.to_path_buf(), file));
        Ok(ledger)
    }

    pub fn append(&mut self, entry: ModelResponse) -> Result<(), GatewayError> {
        if let Some((path, file)) = &mut self.sink {
            let mut line = serde_json::to_string(&entry).expect("ledger entries serialize");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| GatewayError::io(path, e))?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[ModelResponse] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn read_ledger(path: &Path) -> Result<Vec<ModelResponse>, GatewayError> {
    read_jsonl(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureStatus {
    #[default]
    Ok,
    RateLimited,
    ServerError,
    AuthError,
    /// A ledger entry whose retries were exhausted.
    Failed,
}

/// One scripted reply. Ledger lines are valid fixture entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub digest: String,
    #[serde(default)]
    pub message_id: Option<String>,
    #[serde(default)]
    pub raw_output: Option<String>,
    #[serde(default)]
    pub status: FixtureStatus,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub token_usage: TokenUsage,
    #[serde(default)]
    pub error: Option<String>,
}

pub(super) fn read_fixture(path: &Path) -> Result<Vec<FixtureEntry>, GatewayError> {
    let mut entries: Vec<FixtureEntry> = read_jsonl(path)?;
    for e in &mut entries {
        if e.error.is_some() && e.status == FixtureStatus::Ok {
            e.status = FixtureStatus::Failed;
        }
    }
    Ok(entries)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, GatewayError> {
    let file = File::open(path).map_err(|e| GatewayError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GatewayError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| GatewayError::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

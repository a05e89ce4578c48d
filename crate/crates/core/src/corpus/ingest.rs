use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Annotation, Component, CorpusError, LabeledExample, Message, Stance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" => Some(InputFormat::Jsonl),
            "csv" => Some(InputFormat::Csv),
            _ => None,
        }
    }
}

/// An ingested message and its optional gold annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub message: Message,
    pub annotation: Option<Annotation>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IdValue {
    Str(String),
    Int(i64),
}

impl From<IdValue> for String {
    fn from(v: IdValue) -> String {
        match v {
            IdValue::Str(s) => s,
            IdValue::Int(i) => i.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    id: IdValue,
    channel_id: IdValue,
    timestamp: String,
    text: String,
    #[serde(default)]
    annotation: Option<Annotation>,
}

#[derive(Deserialize)]
struct CsvRow {
    id: Option<String>,
    channel_id: Option<String>,
    timestamp: Option<String>,
    text: Option<String>,
    #[serde(default)]
    ct_present: Option<String>,
    #[serde(default)]
    stance: Option<String>,
    #[serde(default)]
    components: Option<String>,
    #[serde(default)]
    reference_only: Option<String>,
}

fn parse_timestamp(raw: &str) -> Result<DateTime<Utc>, String> {
    if let Ok(ts) = DateTime::parse_from_rfc3339(raw) {
        return Ok(ts.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Ok(naive.and_utc());
        }
    }
    Err(format!("invalid timestamp `{raw}`"))
}

fn parse_bool(raw: &str) -> Result<bool, String> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" | "" => Ok(false),
        other => Err(format!("invalid boolean `{other}`")),
    }
}

/// Reads a corpus export, one record per line (JSONL) or row (CSV), in file
/// order. Blank JSONL lines are skipped; line numbers in errors are 1-based
/// physical lines.
pub fn ingest(path: &Path, format: InputFormat) -> Result<Vec<Record>, CorpusError> {
    let records = match format {
        InputFormat::Jsonl => ingest_jsonl(path)?,
        InputFormat::Csv => ingest_csv(path)?,
    };
    let mut seen = HashMap::new();
    for (line, record) in &records {
        if seen.insert(record.message.id.clone(), *line).is_some() {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line: *line,
                id: record.message.id.clone(),
            });
        }
    }
    Ok(records.into_iter().map(|(_, r)| r).collect())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ingest_jsonl(path: &Path) -> Result<Vec<(u64, Record)>, CorpusError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let raw: JsonRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let timestamp = parse_timestamp(&raw.timestamp).map_err(malformed)?;
        out.push((
            line_no,
            Record {
                message: Message::new(raw.id, raw.channel_id, timestamp, raw.text),
                annotation: raw.annotation,
            },
        ));
    }
    Ok(out)
}

fn ingest_csv(path: &Path) -> Result<Vec<(u64, Record)>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: CsvRow = record
            .deserialize(Some(&headers))
            .map_err(|e| CorpusError::Malformed {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
        let malformed = |message: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        };
        let require = |field: Option<String>, name: &str| {
            field
                .filter(|v| !v.is_empty() || name == "text")
                .ok_or_else(|| format!("missing field `{name}`"))
        };
        let id = require(row.id, "id").map_err(malformed)?;
        let channel_id = require(row.channel_id, "channel_id").map_err(malformed)?;
        let timestamp = require(row.timestamp, "timestamp").map_err(malformed)?;
        let text = require(row.text, "text").map_err(malformed)?;
        let timestamp = parse_timestamp(&timestamp).map_err(malformed)?;

        let annotation = match row.ct_present.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(flag) => {
                let ct_present = parse_bool(flag).map_err(malformed)?;
                let stance = match row.stance.as_deref().map(str::trim) {
                    None | Some("") => None,
                    Some(s) => Some(
                        serde_json::from_value::<Stance>(serde_json::Value::String(
                            s.to_ascii_lowercase(),
                        ))
                        .map_err(|_| malformed(format!("unknown stance `{s}`")))?,
                    ),
                };
                let components = row
                    .components
                    .as_deref()
                    .unwrap_or("")
                    .split([';', '|', ','])
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse::<Component>)
                    .collect::<Result<BTreeSet<_>, _>>()
                    .map_err(malformed)?;
                let reference_only = parse_bool(row.reference_only.as_deref().unwrap_or(""))
                    .map_err(malformed)?;
                Some(Annotation {
                    ct_present,
                    stance,
                    components,
                    reference_only,
                })
            }
        };
        out.push((
            line,
            Record {
                message: Message::new(id, channel_id, timestamp, text),
                annotation,
            },
        ));
    }
    Ok(out)
}

/// Writes labeled examples as JSONL.
pub fn write_examples(path: &Path, examples: &[LabeledExample]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for e in examples {
        let line = serde_json::to_string(e).expect("labeled examples serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a split file written by [`write_examples`].
pub fn read_examples(path: &Path) -> Result<Vec<LabeledExample>, CorpusError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: idx as u64 + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn temp_file(contents: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn jsonl_preserves_order() {
        let f = temp_file(
            r#"{"id":"m3","channel_id":"c","timestamp":"2021-03-01T10:00:00Z","text":"drei"}
{"id":"m1","channel_id":"c","timestamp":"2021-03-01T11:00:00Z","text":"eins","annotation":{"ct_present":false}}
{"id":"m2","channel_id":7,"timestamp":"2021-03-01 12:00:00","text":"zwei"}
"#,
            ".jsonl",
        );
        let recs = ingest(f.path(), InputFormat::Jsonl).unwrap();
        let ids: Vec<_> = recs.iter().map(|r| r.message.id.as_str()).collect();
        assert_eq!(ids, ["m3", "m1", "m2"]);
        assert!(recs[0].annotation.is_none());
        assert_eq!(recs[1].annotation, Some(Annotation::negative()));
        assert_eq!(recs[2].message.channel_id, "7");
    }

    #[test]
    fn jsonl_missing_text_names_line() {
        let f = temp_file(
            r#"{"id":"a","channel_id":"c","timestamp":"2021-03-01T10:00:00Z","text":"ok"}
{"id":"b","channel_id":"c","timestamp":"2021-03-01T10:00:00Z"}
"#,
            ".jsonl",
        );
        match ingest(f.path(), InputFormat::Jsonl) {
            Err(CorpusError::Malformed { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("text"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let f = temp_file(
            r#"{"id":"a","channel_id":"c","timestamp":"2021-03-01T10:00:00Z","text":"x"}
{"id":"a","channel_id":"c","timestamp":"2021-03-01T10:00:00Z","text":"y"}
"#,
            ".jsonl",
        );
        assert!(matches!(
            ingest(f.path(), InputFormat::Jsonl),
            Err(CorpusError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn csv_with_quoting_and_annotations() {
        let f = temp_file(
            "id,channel_id,timestamp,text,ct_present,stance,components,reference_only\n\
             1,c1,2021-03-01T10:00:00Z,\"Hallo, \"\"Welt\"\"\nzweite Zeile\",true,belief,actor;goal,false\n\
             2,c1,2021-03-01T10:00:00Z,plain,,,,\n",
            ".csv",
        );
        let recs = ingest(f.path(), InputFormat::Csv).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].message.text, "Hallo, \"Welt\"\nzweite Zeile");
        let ann = recs[0].annotation.as_ref().unwrap();
        assert_eq!(ann.stance, Some(Stance::Belief));
        assert_eq!(ann.components.len(), 2);
        assert!(recs[1].annotation.is_none());
    }

    #[test]
    fn csv_missing_field_is_malformed() {
        let f = temp_file(
            "id,channel_id,timestamp,text\n1,c,2021-03-01T10:00:00Z,ok\n2,,2021-03-01T10:00:00Z,x\n",
            ".csv",
        );
        match ingest(f.path(), InputFormat::Csv) {
            Err(CorpusError::Malformed { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("channel_id"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

//! Annotated message corpora: ingestion, cleaning, gold labels and splits.

mod ingest;
mod preprocess;
mod split;

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Label;

pub use ingest::{ingest, read_examples, write_examples, InputFormat, Record};
pub use preprocess::{
    preprocess, preprocess_corpus, Cleaner, EmojiPolicy, FooterIndex, FooterPolicy, PreprocessRules,
};
pub use split::{split, ClassCounts, DatasetSplit, SplitRatios};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: line {line}: duplicate message id `{id}`")]
    DuplicateId { path: PathBuf, line: u64, id: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("inconsistent annotation: {0}")]
    InconsistentAnnotation(String),
    #[error("invalid split ratios {0:?}: must be non-negative and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("cannot split an empty example set")]
    EmptySplit,
    #[error("stratification failed: class {label:?} has {available} items, need at least {required}")]
    Stratification {
        label: Label,
        available: usize,
        required: usize,
    },
    #[error("fragmentation score undefined: {0}")]
    UndefinedScore(&'static str),
}

/// One social-media post.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: String,
    pub channel_id: String,
    pub timestamp: DateTime<Utc>,
    pub raw_text: String,
    /// Cleaned text; equals `raw_text` until preprocessing runs.
    pub text: String,
}

impl Message {
    pub fn new(
        id: impl Into<String>,
        channel_id: impl Into<String>,
        timestamp: DateTime<Utc>,
        text: impl Into<String>,
    ) -> Self {
        let text = text.into();
        Message {
            id: id.into(),
            channel_id: channel_id.into(),
            timestamp,
            raw_text: text.clone(),
            text,
        }
    }

    /// Whitespace-separated token count of the cleaned text.
    pub fn token_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    Belief,
    Authenticating,
    Directive,
    #[serde(alias = "rhetorical question")]
    RhetoricalQuestion,
    Disbelief,
    Neutral,
    Uncertain,
}

/// Narrative component of a conspiracy theory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Actor,
    Strategy,
    Goal,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Actor, Component::Strategy, Component::Goal];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Actor => "actor",
            Component::Strategy => "strategy",
            Component::Goal => "goal",
        })
    }
}

impl std::str::FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "actor" => Ok(Component::Actor),
            "strategy" => Ok(Component::Strategy),
            "goal" => Ok(Component::Goal),
            other => Err(format!("unknown narrative component `{other}`")),
        }
    }
}

/// Gold annotation facets of one message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub ct_present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stance: Option<Stance>,
    #[serde(default)]
    pub components: BTreeSet<Component>,
    #[serde(default)]
    pub reference_only: bool,
}

impl Annotation {
    pub fn negative() -> Self {
        Annotation {
            ct_present: false,
            stance: None,
            components: BTreeSet::new(),
            reference_only: false,
        }
    }

    pub fn believed(components: impl IntoIterator<Item = Component>) -> Self {
        Annotation {
            ct_present: true,
            stance: Some(Stance::Belief),
            components: components.into_iter().collect(),
            reference_only: false,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if !self.ct_present {
            if !self.components.is_empty() {
                return Err(CorpusError::InconsistentAnnotation(
                    "components set without ct_present".into(),
                ));
            }
            if self.reference_only {
                return Err(CorpusError::InconsistentAnnotation(
                    "reference_only set without ct_present".into(),
                ));
            }
            if self.stance.is_some() {
                return Err(CorpusError::InconsistentAnnotation(
                    "stance set without ct_present".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Outcome of mapping an annotation onto the binary task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOutcome {
    Positive,
    Negative,
    Excluded,
}

/// Positive iff a conspiracy theory is present, believed, and not merely
/// referenced. Negative iff no conspiracy theory is present. Everything else
/// is excluded from the binary task.
pub fn derive_label(annotation: &Annotation) -> Result<LabelOutcome, CorpusError> {
    annotation.validate()?;
    if !annotation.ct_present {
        return Ok(LabelOutcome::Negative);
    }
    if annotation.stance == Some(Stance::Belief) && !annotation.reference_only {
        Ok(LabelOutcome::Positive)
    } else {
        Ok(LabelOutcome::Excluded)
    }
}

/// A message with its binary gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    #[serde(flatten)]
    pub message: Message,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<Annotation>,
}

impl LabeledExample {
    /// Builds a labeled example from an ingested record. Returns `Ok(None)`
    /// for excluded annotations and for records without annotation.
    pub fn from_record(record: Record) -> Result<Option<Self>, CorpusError> {
        let Some(annotation) = record.annotation else {
            return Ok(None);
        };
        let label = match derive_label(&annotation)? {
            LabelOutcome::Positive => Label::Positive,
            LabelOutcome::Negative => Label::Negative,
            LabelOutcome::Excluded => return Ok(None),
        };
        Ok(Some(LabeledExample {
            message: record.message,
            label,
            annotation: Some(annotation),
        }))
    }

    pub fn id(&self) -> &str {
        &self.message.id
    }

    /// Number of narrative components on a positive example, if annotated.
    pub fn component_count(&self) -> Option<usize> {
        self.annotation
            .as_ref()
            .filter(|a| a.ct_present)
            .map(|a| a.components.len())
    }
}

/// Keeps the examples whose cleaned text has at least `min_tokens`
/// whitespace-separated tokens.
pub fn filter_short(examples: Vec<LabeledExample>, min_tokens: usize) -> Vec<LabeledExample> {
    examples
        .into_iter()
        .filter(|e| e.message.token_count() >= min_tokens)
        .collect()
}

/// Drops every example whose cleaned text already occurred earlier.
pub fn dedupe(examples: Vec<LabeledExample>) -> Vec<LabeledExample> {
    let mut seen = std::collections::HashSet::new();
    examples
        .into_iter()
        .filter(|e| seen.insert(e.message.text.clone()))
        .collect()
}

/// Number of missing narrative components of a conspiracy-theory text.
pub fn fragmentation_score(annotation: &Annotation) -> Result<u8, CorpusError> {
    if !annotation.ct_present {
        return Err(CorpusError::UndefinedScore("no conspiracy theory present"));
    }
    if annotation.components.is_empty() {
        return Err(CorpusError::UndefinedScore("no narrative components annotated"));
    }
    Ok((Component::ALL.len() - annotation.components.len()) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn example(id: &str, text: &str) -> LabeledExample {
        LabeledExample {
            message: Message::new(id, "c", Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap(), text),
            label: Label::Negative,
            annotation: None,
        }
    }

    #[test]
    fn derive_label_cases() {
        let pos = Annotation::believed([Component::Actor]);
        assert_eq!(derive_label(&pos).unwrap(), LabelOutcome::Positive);
        assert_eq!(derive_label(&Annotation::negative()).unwrap(), LabelOutcome::Negative);

        let mut reference = Annotation::believed([]);
        reference.reference_only = true;
        assert_eq!(derive_label(&reference).unwrap(), LabelOutcome::Excluded);

        let mut disbelief = Annotation::believed([Component::Goal]);
        disbelief.stance = Some(Stance::Disbelief);
        assert_eq!(derive_label(&disbelief).unwrap(), LabelOutcome::Excluded);
    }

    #[test]
    fn inconsistent_annotation_is_rejected() {
        let mut bad = Annotation::negative();
        bad.components.insert(Component::Actor);
        assert!(matches!(
            derive_label(&bad),
            Err(CorpusError::InconsistentAnnotation(_))
        ));
        let mut bad = Annotation::negative();
        bad.reference_only = true;
        assert!(derive_label(&bad).is_err());
    }

    #[test]
    fn filter_short_boundary() {
        let kept = filter_short(
            vec![example("a", "a b c d e"), example("b", "zu kurz")],
            5,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id(), "a");
    }

    #[test]
    fn filter_short_counts_whitespace_tokens() {
        let texts = ["w1 w2 w3 w4", "w1 w2\tw3 w4\nw5", "w1  w2 w3 w4 w5 w6"];
        let examples: Vec<_> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| example(&i.to_string(), t))
            .collect();
        // independent count: characters that start a run of non-whitespace
        let oracle = texts
            .iter()
            .filter(|t| {
                let chars: Vec<char> = t.chars().collect();
                let starts = (0..chars.len())
                    .filter(|&i| !chars[i].is_whitespace() && (i == 0 || chars[i - 1].is_whitespace()))
                    .count();
                starts >= 5
            })
            .count();
        assert_eq!(oracle, 2);
        assert_eq!(filter_short(examples, 5).len(), oracle);
    }

    #[test]
    fn dedupe_keeps_first() {
        let out = dedupe(vec![
            example("1", "gleicher Text"),
            example("2", "anderer Text"),
            example("3", "gleicher Text"),
        ]);
        let ids: Vec<_> = out.iter().map(|e| e.id()).collect();
        assert_eq!(ids, ["1", "2"]);
        assert!(dedupe(Vec::new()).is_empty());
    }

    #[test]
    fn dedupe_after_trailing_space_cleanup() {
        let rules = PreprocessRules::default();
        let mut a = example("1", "Das ist ein Text");
        let mut b = example("2", "Das ist ein Text   ");
        a.message = preprocess(&a.message, &rules);
        b.message = preprocess(&b.message, &rules);
        assert_eq!(dedupe(vec![a, b]).len(), 1);
    }

    #[test]
    fn fragmentation_scores() {
        use Component::*;
        assert_eq!(fragmentation_score(&Annotation::believed([Actor, Strategy, Goal])).unwrap(), 0);
        assert_eq!(fragmentation_score(&Annotation::believed([Actor])).unwrap(), 2);
        assert_eq!(fragmentation_score(&Annotation::believed([Actor, Goal])).unwrap(), 1);
        assert!(fragmentation_score(&Annotation::negative()).is_err());
        assert!(fragmentation_score(&Annotation::believed([])).is_err());
    }
}

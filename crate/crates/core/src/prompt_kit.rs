//! Prompt rendering for zero-shot binary, zero-shot probabilistic and
//! few-shot classification.
//!
//! Templates live in `resources/prompts/` and use `{name}` placeholders.
//! Substitution is a single left-to-right pass, so placeholder-like text
//! inside a message is never expanded.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{LabeledExample, Message};
use crate::sampler::{FewShotSet, FEW_SHOT_SET_SIZE};
use crate::Label;

/// Bumped whenever any template below changes.
pub const TEMPLATE_VERSION: &str = "1";

macro_rules! resource {
    ($name:literal) => {
        strip_newline(include_str!(concat!("../resources/prompts/", $name)))
    };
}

const fn strip_newline(s: &str) -> &str {
    match s.as_bytes() {
        [rest @ .., b'\n'] => {
            match std::str::from_utf8(rest) {
                Ok(s) => s,
                Err(_) => panic!("template is not UTF-8"),
            }
        }
        _ => s,
    }
}

pub const SYSTEM_PROMPT: &str = resource!("system.txt");
pub const CUSTOM_DEFINITION: &str = resource!("definition_custom.txt");
pub const LOREM_IPSUM_DEFINITION: &str = resource!("definition_lorem_ipsum.txt");

const DEFINITION_CLAUSE: &str = resource!("definition_clause.txt");
const NO_DEFINITION_CLAUSE: &str = "or not";
const ZERO_SHOT_BINARY: &str = resource!("zero_shot_binary.txt");
const ZERO_SHOT_PROBABILISTIC: &str = resource!("zero_shot_probabilistic.txt");
const FEW_SHOT: &str = resource!("few_shot.txt");
const FEW_SHOT_EXAMPLE: &str = resource!("few_shot_example.txt");
const BINARY_GPT: &str = resource!("constraint_binary_gpt.txt");
const BINARY_LLAMA: &str = resource!("constraint_binary_llama.txt");
const PROBABILISTIC_GPT: &str = resource!("constraint_probabilistic_gpt.txt");
const PROBABILISTIC_LLAMA: &str = resource!("constraint_probabilistic_llama.txt");
const FEW_SHOT_GPT: &str = resource!("constraint_few_shot_gpt.txt");
const FEW_SHOT_LLAMA: &str = resource!("constraint_few_shot_llama.txt");

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("message `{0}` has empty text")]
    EmptyMessage(String),
    #[error("prompt spec is for {actual}, renderer expects {expected}")]
    WrongTask { expected: Task, actual: Task },
    #[error("few-shot prompts take no definition (got {0})")]
    DefinitionNotAllowed(DefinitionVariant),
    #[error("few-shot prompts need exactly {expected} examples, got {actual}")]
    ExampleCount { expected: usize, actual: usize },
    #[error("target message `{0}` is one of the in-context examples")]
    TargetInExamples(String),
    #[error("unknown placeholder `{{{0}}}` in template")]
    UnknownPlaceholder(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ZeroShotBinary,
    ZeroShotProbabilistic,
    FewShotBinary,
}

impl Task {
    pub fn is_probabilistic(self) -> bool {
        self == Task::ZeroShotProbabilistic
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::ZeroShotBinary => "zero-shot-binary",
            Task::ZeroShotProbabilistic => "zero-shot-probabilistic",
            Task::FewShotBinary => "few-shot-binary",
        })
    }
}

/// Conspiracy-theory definition injected into zero-shot prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DefinitionVariant {
    /// Expert definition derived from the annotation guide.
    Custom,
    /// 100-word placeholder text of the same shape.
    LoremIpsum,
    None,
}

impl DefinitionVariant {
    pub fn text(self) -> &'static str {
        match self {
            DefinitionVariant::Custom => CUSTOM_DEFINITION,
            DefinitionVariant::LoremIpsum => LOREM_IPSUM_DEFINITION,
            DefinitionVariant::None => "",
        }
    }
}

impl fmt::Display for DefinitionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DefinitionVariant::Custom => "custom",
            DefinitionVariant::LoremIpsum => "lorem-ipsum",
            DefinitionVariant::None => "none",
        })
    }
}

/// Model family; selects the output-constraint phrasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    Gpt,
    Llama,
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dialect::Gpt => "gpt",
            Dialect::Llama => "llama",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub task: Task,
    pub definition: DefinitionVariant,
    pub dialect: Dialect,
    #[serde(default = "default_system_prompt")]
    pub system_prompt: String,
}

fn default_system_prompt() -> String {
    SYSTEM_PROMPT.to_string()
}

impl PromptSpec {
    pub fn new(task: Task, definition: DefinitionVariant, dialect: Dialect) -> Self {
        PromptSpec {
            task,
            definition,
            dialect,
            system_prompt: default_system_prompt(),
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.task == Task::FewShotBinary && self.definition != DefinitionVariant::None {
            return Err(PromptError::DefinitionNotAllowed(self.definition));
        }
        Ok(())
    }

    fn expect_task(&self, expected: Task) -> Result<(), PromptError> {
        if self.task != expected {
            return Err(PromptError::WrongTask {
                expected,
                actual: self.task,
            });
        }
        self.validate()
    }
}

/// A fully rendered chat prompt for one target message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
    pub message_id: String,
    pub spec: PromptSpec,
}

impl RenderedPrompt {
    /// Hex SHA-256 over `system`, a unit separator byte, and `user`.
    pub fn digest(&self) -> String {
        prompt_digest(&self.system, &self.user)
    }
}

pub fn prompt_digest(system: &str, user: &str) -> String {
    let mut h = Sha256::new();
    h.update(system.as_bytes());
    h.update([0x1f]);
    h.update(user.as_bytes());
    hex::encode(h.finalize())
}

/// Single-pass `{name}` substitution.
fn fill(template: &str, values: &BTreeMap<&str, &str>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if after[..close].chars().all(|c| c.is_ascii_alphanumeric() || c == '_') && close > 0 => {
                let name = &after[..close];
                let value = values
                    .get(name)
                    .ok_or_else(|| PromptError::UnknownPlaceholder(name.to_string()))?;
                out.push_str(value);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn check_text(message: &Message) -> Result<(), PromptError> {
    if message.text.trim().is_empty() {
        return Err(PromptError::EmptyMessage(message.id.clone()));
    }
    Ok(())
}

fn definition_clause(definition: DefinitionVariant) -> Result<String, PromptError> {
    match definition {
        DefinitionVariant::None => Ok(NO_DEFINITION_CLAUSE.to_string()),
        d => fill(DEFINITION_CLAUSE, &BTreeMap::from([("definition", d.text())])),
    }
}

fn zero_shot(message: &Message, spec: &PromptSpec, template: &str, constraint: &str) -> Result<RenderedPrompt, PromptError> {
    check_text(message)?;
    let clause = definition_clause(spec.definition)?;
    let instruction = fill(
        template,
        &BTreeMap::from([("message", message.text.as_str()), ("clause", clause.as_str())]),
    )?;
    Ok(RenderedPrompt {
        system: spec.system_prompt.clone(),
        user: format!("{instruction}\n{constraint}"),
        message_id: message.id.clone(),
        spec: spec.clone(),
    })
}

pub fn render_zero_shot_binary(message: &Message, spec: &PromptSpec) -> Result<RenderedPrompt, PromptError> {
    spec.expect_task(Task::ZeroShotBinary)?;
    let constraint = match spec.dialect {
        Dialect::Gpt => BINARY_GPT,
        Dialect::Llama => BINARY_LLAMA,
    };
    zero_shot(message, spec, ZERO_SHOT_BINARY, constraint)
}

pub fn render_zero_shot_probabilistic(message: &Message, spec: &PromptSpec) -> Result<RenderedPrompt, PromptError> {
    spec.expect_task(Task::ZeroShotProbabilistic)?;
    let constraint = match spec.dialect {
        Dialect::Gpt => PROBABILISTIC_GPT,
        Dialect::Llama => PROBABILISTIC_LLAMA,
    };
    zero_shot(message, spec, ZERO_SHOT_PROBABILISTIC, constraint)
}

/// Label text shown for in-context examples; matches the binary answer options.
pub fn label_text(label: Label) -> &'static str {
    match label {
        Label::Positive => "Yes",
        Label::Negative => "No",
    }
}

fn few_shot_user(target: &str, pairs: &[(&str, &str)], dialect: Dialect) -> Result<String, PromptError> {
    let examples = pairs
        .iter()
        .map(|(m, l)| fill(FEW_SHOT_EXAMPLE, &BTreeMap::from([("message", *m), ("label", *l)])))
        .collect::<Result<Vec<_>, _>>()?
        .join("\n");
    let body = fill(FEW_SHOT, &BTreeMap::from([("examples", examples.as_str())]))?;
    let constraint = match dialect {
        Dialect::Gpt => FEW_SHOT_GPT,
        Dialect::Llama => FEW_SHOT_LLAMA,
    };
    let tail = fill(constraint, &BTreeMap::from([("message", target)]))?;
    Ok(format!("{body}\n{tail}"))
}

/// Few-shot prompt from an explicit example list (in presentation order).
pub fn render_few_shot_examples(
    message: &Message,
    examples: &[LabeledExample],
    spec: &PromptSpec,
) -> Result<RenderedPrompt, PromptError> {
    spec.expect_task(Task::FewShotBinary)?;
    check_text(message)?;
    if examples.len() != FEW_SHOT_SET_SIZE {
        return Err(PromptError::ExampleCount {
            expected: FEW_SHOT_SET_SIZE,
            actual: examples.len(),
        });
    }
    if examples.iter().any(|e| e.message.id == message.id) {
        return Err(PromptError::TargetInExamples(message.id.clone()));
    }
    let pairs: Vec<(&str, &str)> = examples
        .iter()
        .map(|e| (e.message.text.as_str(), label_text(e.label)))
        .collect();
    Ok(RenderedPrompt {
        system: spec.system_prompt.clone(),
        user: few_shot_user(&message.text, &pairs, spec.dialect)?,
        message_id: message.id.clone(),
        spec: spec.clone(),
    })
}

pub fn render_few_shot(message: &Message, set: &FewShotSet, spec: &PromptSpec) -> Result<RenderedPrompt, PromptError> {
    render_few_shot_examples(message, &set.items, spec)
}

/// Dispatches on `spec.task`. Few-shot specs require `set`.
pub fn render(message: &Message, spec: &PromptSpec, set: Option<&FewShotSet>) -> Result<RenderedPrompt, PromptError> {
    match spec.task {
        Task::ZeroShotBinary => render_zero_shot_binary(message, spec),
        Task::ZeroShotProbabilistic => render_zero_shot_probabilistic(message, spec),
        Task::FewShotBinary => match set {
            Some(set) => render_few_shot(message, set, spec),
            None => Err(PromptError::ExampleCount {
                expected: FEW_SHOT_SET_SIZE,
                actual: 0,
            }),
        },
    }
}

/// Every template combination with literal placeholders, for auditing.
pub fn dump_templates() -> Vec<(String, RenderedPrompt)> {
    use chrono::DateTime;
    let target = Message::new("{message_id}", "-", DateTime::UNIX_EPOCH, "{message}");
    let mut out = Vec::new();
    for dialect in [Dialect::Gpt, Dialect::Llama] {
        for task in [Task::ZeroShotBinary, Task::ZeroShotProbabilistic] {
            for definition in [DefinitionVariant::Custom, DefinitionVariant::LoremIpsum, DefinitionVariant::None] {
                let spec = PromptSpec::new(task, definition, dialect);
                let prompt = render(&target, &spec, None).expect("placeholder message renders");
                out.push((format!("{task} / definition={definition} / dialect={dialect}"), prompt));
            }
        }
        let names: Vec<(String, String)> = (1..=FEW_SHOT_SET_SIZE)
            .map(|i| (format!("{{message_{i}}}"), format!("{{label_{i}}}")))
            .collect();
        let pairs: Vec<(&str, &str)> = names.iter().map(|(m, l)| (m.as_str(), l.as_str())).collect();
        let spec = PromptSpec::new(Task::FewShotBinary, DefinitionVariant::None, dialect);
        out.push((
            format!("{} / definition=none / dialect={dialect}", Task::FewShotBinary),
            RenderedPrompt {
                system: spec.system_prompt.clone(),
                user: few_shot_user("{message}", &pairs, dialect).expect("placeholder few-shot renders"),
                message_id: target.id.clone(),
                spec,
            },
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Annotation;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn msg(id: &str, text: &str) -> Message {
        Message::new(id, "c", Utc.with_ymd_and_hms(2021, 5, 1, 0, 0, 0).unwrap(), text)
    }

    fn examples(n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| LabeledExample {
                message: msg(&format!("ex{i}"), &format!("Beispieltext Nummer {i}")),
                label: Label::from_bool(i % 2 == 0),
                annotation: Some(if i % 2 == 0 {
                    Annotation::believed([crate::corpus::Component::Actor])
                } else {
                    Annotation::negative()
                }),
            })
            .collect()
    }

    const M: &str = "Die Impfung ist Teil eines geheimen Plans der Eliten.";

    #[test]
    fn lorem_ipsum_is_hundred_words() {
        assert_eq!(LOREM_IPSUM_DEFINITION.split_whitespace().count(), 100);
        assert!(CUSTOM_DEFINITION.starts_with("Conspiracy theories formulate the strong belief"));
        assert!(CUSTOM_DEFINITION.ends_with("via certain codes or hashtags."));
        assert_eq!(
            SYSTEM_PROMPT,
            "You are a data annotation expert trained to identify conspiracy theories on social media."
        );
    }

    #[test]
    fn binary_custom_gpt() {
        let spec = PromptSpec::new(Task::ZeroShotBinary, DefinitionVariant::Custom, Dialect::Gpt);
        let p = render_zero_shot_binary(&msg("m", M), &spec).unwrap();
        let expected = format!(
            "Consider the following message: '{M}'. You have to decide whether the message communicates a \
             conspiracy theory considering the following definition: '{CUSTOM_DEFINITION}'. Give your answer \
             using one of the two options:\na) Yes\nb) No\nDo not provide any other outputs or any explanation \
             for your output."
        );
        assert_eq!(p.user, expected);
        assert_eq!(p.system, SYSTEM_PROMPT);
        assert_eq!(p.message_id, "m");
    }

    #[test]
    fn binary_none_llama() {
        let spec = PromptSpec::new(Task::ZeroShotBinary, DefinitionVariant::None, Dialect::Llama);
        let p = render_zero_shot_binary(&msg("m", M), &spec).unwrap();
        assert!(p.user.contains("communicates a conspiracy theory or not. Give your answer"));
        assert!(p.user.ends_with("\nAnswer in one line, only use Yes or No."));
        assert!(!p.user.contains("definition"));
    }

    #[test]
    fn probabilistic_variants() {
        let m = msg("m", M);
        let gpt = render_zero_shot_probabilistic(
            &m,
            &PromptSpec::new(Task::ZeroShotProbabilistic, DefinitionVariant::Custom, Dialect::Gpt),
        )
        .unwrap();
        assert!(gpt.user.ends_with("Do not provide any other outputs or any explanation for your output."));
        assert!(gpt.user.contains("provide a probability score between 0 to 1"));

        let lorem = render_zero_shot_probabilistic(
            &m,
            &PromptSpec::new(Task::ZeroShotProbabilistic, DefinitionVariant::LoremIpsum, Dialect::Gpt),
        )
        .unwrap();
        assert_eq!(lorem.user.matches(LOREM_IPSUM_DEFINITION).count(), 1);

        let llama = render_zero_shot_probabilistic(
            &m,
            &PromptSpec::new(Task::ZeroShotProbabilistic, DefinitionVariant::None, Dialect::Llama),
        )
        .unwrap();
        assert!(llama.user.contains("conspiracy theory or not."));
        assert!(llama.user.ends_with("only return the score. Do not provide any other outputs or any explanation for your output. The score is: "));
    }

    #[test]
    fn few_shot_layout() {
        let ex = examples(14);
        let spec = PromptSpec::new(Task::FewShotBinary, DefinitionVariant::None, Dialect::Gpt);
        let p = render_few_shot_examples(&msg("t", M), &ex, &spec).unwrap();
        assert!(p.user.starts_with(
            "You have to decide whether the message communicates a conspiracy theory or not.\nExamples:\n\
             message: Beispieltext Nummer 0\nlabel: Yes\nmessage: Beispieltext Nummer 1\nlabel: No\n"
        ));
        assert!(p.user.ends_with(&format!("label: No\nmessage: {M}\nlabel: ")));
        assert_eq!(p.user.matches("message: ").count(), 15);

        let llama = PromptSpec::new(Task::FewShotBinary, DefinitionVariant::None, Dialect::Llama);
        let p = render_few_shot_examples(&msg("t", M), &ex, &llama).unwrap();
        assert!(p.user.ends_with(&format!(
            "label: No\nAnswer in one line, only return the label.\nmessage: {M}\nLabel: "
        )));
    }

    #[test]
    fn few_shot_errors() {
        let spec = PromptSpec::new(Task::FewShotBinary, DefinitionVariant::None, Dialect::Gpt);
        assert_eq!(
            render_few_shot_examples(&msg("t", M), &examples(13), &spec).unwrap_err(),
            PromptError::ExampleCount { expected: 14, actual: 13 }
        );
        let ex = examples(14);
        assert!(matches!(
            render_few_shot_examples(&ex[3].message, &ex, &spec),
            Err(PromptError::TargetInExamples(_))
        ));
        let with_def = PromptSpec::new(Task::FewShotBinary, DefinitionVariant::Custom, Dialect::Gpt);
        assert!(matches!(
            render_few_shot_examples(&msg("t", M), &ex, &with_def),
            Err(PromptError::DefinitionNotAllowed(_))
        ));
    }

    #[test]
    fn render_errors() {
        let spec = PromptSpec::new(Task::ZeroShotBinary, DefinitionVariant::Custom, Dialect::Gpt);
        assert!(matches!(
            render_zero_shot_binary(&msg("e", "   "), &spec),
            Err(PromptError::EmptyMessage(_))
        ));
        assert!(matches!(
            render_zero_shot_probabilistic(&msg("m", M), &spec),
            Err(PromptError::WrongTask { .. })
        ));
    }

    #[test]
    fn placeholders_in_message_are_not_expanded() {
        let spec = PromptSpec::new(Task::ZeroShotBinary, DefinitionVariant::None, Dialect::Gpt);
        let text = "Sie sagen {definition} und {message} und {";
        let p = render_zero_shot_binary(&msg("m", text), &spec).unwrap();
        assert_eq!(p.user.matches(text).count(), 1);
        assert!(!p.user.contains(CUSTOM_DEFINITION));
    }

    #[test]
    fn dump_covers_all_combinations() {
        let dumped = dump_templates();
        assert_eq!(dumped.len(), 14);
        assert!(dumped.iter().all(|(_, p)| p.user.contains("{message}")));
        assert!(dumped.iter().any(|(_, p)| p.user.contains("{label_14}")));
    }

    fn any_spec() -> impl Strategy<Value = PromptSpec> {
        (
            prop_oneof![Just(Task::ZeroShotBinary), Just(Task::ZeroShotProbabilistic), Just(Task::FewShotBinary)],
            prop_oneof![
                Just(DefinitionVariant::Custom),
                Just(DefinitionVariant::LoremIpsum),
                Just(DefinitionVariant::None)
            ],
            prop_oneof![Just(Dialect::Gpt), Just(Dialect::Llama)],
        )
            .prop_map(|(task, definition, dialect)| {
                let definition = if task == Task::FewShotBinary { DefinitionVariant::None } else { definition };
                PromptSpec::new(task, definition, dialect)
            })
    }

    fn constraint_of(spec: &PromptSpec) -> &'static str {
        match (spec.task, spec.dialect) {
            (Task::ZeroShotBinary, Dialect::Gpt) => BINARY_GPT,
            (Task::ZeroShotBinary, Dialect::Llama) => BINARY_LLAMA,
            (Task::ZeroShotProbabilistic, Dialect::Gpt) => PROBABILISTIC_GPT,
            (Task::ZeroShotProbabilistic, Dialect::Llama) => PROBABILISTIC_LLAMA,
            (Task::FewShotBinary, Dialect::Gpt) => "\nlabel: ",
            (Task::FewShotBinary, Dialect::Llama) => "\nLabel: ",
        }
    }

    proptest! {
        #[test]
        fn rendering_invariants(body in "[a-zA-ZäöüÄÖÜß0-9 ,.!?'{}]{1,80}", spec in any_spec()) {
            let text = format!("ZIEL<{body}>");
            let m = msg("target", &text);
            let ex = examples(14);
            let set = FewShotSet::from_items(ex, 0, "train");
            let a = render(&m, &spec, Some(&set)).unwrap();
            let b = render(&m, &spec, Some(&set)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.user.matches(text.as_str()).count(), 1);
            match spec.definition {
                DefinitionVariant::None => {
                    prop_assert!(!a.user.contains(CUSTOM_DEFINITION));
                    prop_assert!(!a.user.contains("Lorem ipsum"));
                }
                d => prop_assert_eq!(a.user.matches(d.text()).count(), 1),
            }
            prop_assert!(a.user.ends_with(constraint_of(&spec)));
            let other = match spec.dialect { Dialect::Gpt => Dialect::Llama, Dialect::Llama => Dialect::Gpt };
            let other_spec = PromptSpec { dialect: other, ..spec.clone() };
            prop_assert!(!a.user.ends_with(constraint_of(&other_spec)));
        }
    }
}

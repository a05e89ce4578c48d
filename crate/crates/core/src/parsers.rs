//! Raw model output -> typed verdicts.
//!
//! Every parser is total: the worst outcome is [`ParseStatus::Failed`] with
//! no verdict. `Clean` means the output was exactly the requested token;
//! `Recovered` means the verdict was found after normalisation.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::prompt_kit::Task;
use crate::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Binary(Label),
    Score(f64),
}

impl Verdict {
    /// Binary view of the verdict; scores need a threshold.
    pub fn label(self, threshold: Option<f64>) -> Option<Label> {
        match self {
            Verdict::Binary(l) => Some(l),
            Verdict::Score(s) => threshold.map(|t| Label::from_bool(s >= t)),
        }
    }

    pub fn score(self) -> Option<f64> {
        match self {
            Verdict::Score(s) => Some(s),
            Verdict::Binary(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Clean,
    Recovered,
    Failed,
    Imported,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Parsed {
    pub verdict: Option<Verdict>,
    pub status: ParseStatus,
}

impl Parsed {
    fn failed() -> Self {
        Parsed {
            verdict: None,
            status: ParseStatus::Failed,
        }
    }

    fn binary(label: Label, clean: bool) -> Self {
        Parsed {
            verdict: Some(Verdict::Binary(label)),
            status: if clean { ParseStatus::Clean } else { ParseStatus::Recovered },
        }
    }
}

/// Per-message model verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub message_id: String,
    pub verdict: Option<Verdict>,
    pub raw_output: String,
    pub parse_status: ParseStatus,
}

impl Prediction {
    pub fn from_raw(message_id: impl Into<String>, raw: impl Into<String>, task: Task) -> Self {
        let raw = raw.into();
        let parsed = parse_for_task(task, &raw);
        Prediction {
            message_id: message_id.into(),
            verdict: parsed.verdict,
            raw_output: raw,
            parse_status: parsed.status,
        }
    }

    pub fn imported(message_id: impl Into<String>, verdict: Verdict) -> Self {
        Prediction {
            message_id: message_id.into(),
            verdict: Some(verdict),
            raw_output: String::new(),
            parse_status: ParseStatus::Imported,
        }
    }

    pub fn label(&self, threshold: Option<f64>) -> Option<Label> {
        self.verdict.and_then(|v| v.label(threshold))
    }
}

pub fn parse_for_task(task: Task, raw: &str) -> Parsed {
    match task {
        Task::ZeroShotBinary => parse_binary(raw),
        Task::ZeroShotProbabilistic => parse_probability(raw),
        Task::FewShotBinary => parse_few_shot_label(raw),
    }
}

fn is_wrapper(c: char) -> bool {
    c.is_whitespace()
        || matches!(
            c,
            '"' | '\'' | '`' | '“' | '”' | '„' | '‚' | '‘' | '’' | '«' | '»' | '.' | ',' | '!' | '?' | ';' | ':' | '*'
                | '[' | ']'
        )
}

/// `t` ends in a standalone `a)` or `b)` option marker.
fn ends_with_option_marker(t: &str) -> bool {
    let b = t.as_bytes();
    let n = b.len();
    n >= 2 && matches!(&b[n - 2..], b"a)" | b"b)") && (n == 2 || !b[n - 3].is_ascii_alphanumeric())
}

fn strip_wrappers(s: &str) -> &str {
    let mut s = s.trim_start_matches(|c: char| is_wrapper(c) || c == '(');
    loop {
        let mut t = s.trim_end_matches(is_wrapper);
        if t.ends_with(')') && !ends_with_option_marker(t) {
            t = &t[..t.len() - 1];
        }
        if t.len() == s.len() {
            return t;
        }
        s = t;
    }
}

fn word_verdict(word: &str) -> Option<(Label, bool)> {
    match word {
        "yes" => Some((Label::Positive, false)),
        "no" => Some((Label::Negative, false)),
        "ja" => Some((Label::Positive, true)),
        "nein" => Some((Label::Negative, true)),
        _ => None,
    }
}

/// Binary answer grammar: optional `label:`/`answer:`/`a)`/`b)` prefixes,
/// a yes/no word (English or German) or a lone `1`/`0`, surrounded by any
/// whitespace, quotes or punctuation. Failing an exact match, a single
/// consistent yes/no word anywhere in the text is accepted.
pub fn parse_binary(raw: &str) -> Parsed {
    match raw {
        "Yes" => return Parsed::binary(Label::Positive, true),
        "No" => return Parsed::binary(Label::Negative, true),
        _ => {}
    }
    let lower = raw.to_lowercase();
    let mut core = strip_wrappers(&lower);
    let mut option: Option<Label> = None;
    loop {
        let before = core;
        for prefix in ["label:", "answer:", "label", "answer"] {
            if let Some(rest) = core.strip_prefix(prefix) {
                if prefix.ends_with(':') || rest.starts_with([' ', ':']) {
                    core = strip_wrappers(rest);
                }
            }
        }
        for (prefix, label) in [("a)", Label::Positive), ("b)", Label::Negative)] {
            if let Some(rest) = core.strip_prefix(prefix) {
                if option.is_some_and(|o| o != label) {
                    return Parsed::failed();
                }
                option = Some(label);
                core = strip_wrappers(rest);
            }
        }
        if core == before {
            break;
        }
    }

    let exact = match core {
        "" => option.map(|l| (l, false)),
        "1" => Some((Label::Positive, false)),
        "0" => Some((Label::Negative, false)),
        w => word_verdict(w),
    };
    if let Some((label, _)) = exact {
        if option.is_some_and(|o| o != label) {
            return Parsed::failed();
        }
        return Parsed::binary(label, false);
    }

    let mut word: Option<Label> = None;
    for w in core.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        if let Some((label, _)) = word_verdict(w) {
            if word.is_some_and(|prev| prev != label) {
                return Parsed::failed();
            }
            word = Some(label);
        }
    }
    match (option, word) {
        (Some(o), Some(w)) if o != w => Parsed::failed(),
        (_, Some(label)) | (Some(label), None) => Parsed::binary(label, false),
        (None, None) => Parsed::failed(),
    }
}

static DECIMAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"-?(?:[0-9]+(?:[.,][0-9]+)?|[.,][0-9]+)").unwrap());

/// Probability grammar: the decimal literals in the output (`0`, `1`,
/// `0.x`, `.x`, also with a decimal comma) that fall in `[0, 1]` must all
/// denote the same value. Out-of-range literals are ignored, values are
/// never clamped.
pub fn parse_probability(raw: &str) -> Parsed {
    let mut value: Option<f64> = None;
    let mut literal_only = false;
    for m in DECIMAL.find_iter(raw) {
        let Ok(v) = m.as_str().replace(',', ".").parse::<f64>() else {
            continue;
        };
        if !(0.0..=1.0).contains(&v) || m.as_str().starts_with('-') && v != 0.0 {
            continue;
        }
        match value {
            Some(prev) if prev != v => return Parsed::failed(),
            Some(_) => {}
            None => {
                value = Some(v);
                literal_only = m.as_str() == raw && !raw.contains(',');
            }
        }
    }
    match value {
        Some(v) => Parsed {
            verdict: Some(Verdict::Score(v)),
            status: if literal_only { ParseStatus::Clean } else { ParseStatus::Recovered },
        },
        None => Parsed::failed(),
    }
}

/// Few-shot label: the first line that parses as a binary answer wins.
pub fn parse_few_shot_label(raw: &str) -> Parsed {
    if let r @ ("Yes" | "No") = raw {
        return parse_binary(r);
    }
    raw.lines()
        .map(parse_binary)
        .find(|p| p.verdict.is_some())
        .map(|p| Parsed {
            status: ParseStatus::Recovered,
            ..p
        })
        .unwrap_or_else(Parsed::failed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bin(raw: &str) -> (Option<Label>, ParseStatus) {
        let p = parse_binary(raw);
        (p.verdict.and_then(|v| v.label(None)), p.status)
    }

    #[test]
    fn binary_examples() {
        assert_eq!(bin("Yes"), (Some(Label::Positive), ParseStatus::Clean));
        assert_eq!(bin("No"), (Some(Label::Negative), ParseStatus::Clean));
        assert_eq!(bin(" b) No\n"), (Some(Label::Negative), ParseStatus::Recovered));
        assert_eq!(bin("a) Yes"), (Some(Label::Positive), ParseStatus::Recovered));
        assert_eq!(bin("Answer: yes."), (Some(Label::Positive), ParseStatus::Recovered));
        assert_eq!(bin("1"), (Some(Label::Positive), ParseStatus::Recovered));
        assert_eq!(bin("0"), (Some(Label::Negative), ParseStatus::Recovered));
        assert_eq!(bin("Ja"), (Some(Label::Positive), ParseStatus::Recovered));
        assert_eq!(bin("The message could be either."), (None, ParseStatus::Failed));
        assert_eq!(bin("Yes or No"), (None, ParseStatus::Failed));
        assert_eq!(bin("a) No"), (None, ParseStatus::Failed));
        assert_eq!(bin(""), (None, ParseStatus::Failed));
    }

    #[test]
    fn probability_examples() {
        let p = parse_probability("0.85");
        assert_eq!((p.verdict, p.status), (Some(Verdict::Score(0.85)), ParseStatus::Clean));
        let p = parse_probability("The score is: 0.7");
        assert_eq!((p.verdict, p.status), (Some(Verdict::Score(0.7)), ParseStatus::Recovered));
        assert_eq!(parse_probability("maybe 1.5").status, ParseStatus::Failed);
        assert_eq!(parse_probability(".3").verdict, Some(Verdict::Score(0.3)));
        assert_eq!(parse_probability("0,8").verdict, Some(Verdict::Score(0.8)));
        assert_eq!(parse_probability("0.2 or 0.9").status, ParseStatus::Failed);
        assert_eq!(parse_probability("-0.4").status, ParseStatus::Failed);
        assert_eq!(parse_probability("").status, ParseStatus::Failed);
    }

    #[test]
    fn few_shot_examples() {
        let p = parse_few_shot_label("label: Yes");
        assert_eq!(p.verdict, Some(Verdict::Binary(Label::Positive)));
        let p = parse_few_shot_label("Yes\nExplanation: the text blames no one.");
        assert_eq!(p.verdict, Some(Verdict::Binary(Label::Positive)));
        assert_eq!(p.status, ParseStatus::Recovered);
        assert_eq!(parse_few_shot_label("").status, ParseStatus::Failed);
        assert_eq!(parse_few_shot_label("No").status, ParseStatus::Clean);
    }

    fn accepted() -> impl Strategy<Value = (String, Label)> {
        prop_oneof![
            Just(("Yes".to_string(), Label::Positive)),
            Just(("No".to_string(), Label::Negative)),
            Just(("yes".to_string(), Label::Positive)),
            Just(("NO".to_string(), Label::Negative)),
            Just(("a) Yes".to_string(), Label::Positive)),
            Just(("b) No".to_string(), Label::Negative)),
            Just(("Label: Yes".to_string(), Label::Positive)),
            Just(("Answer: No".to_string(), Label::Negative)),
            Just(("Nein".to_string(), Label::Negative)),
            Just(("1".to_string(), Label::Positive)),
        ]
    }

    proptest! {
        #[test]
        fn binary_stable_under_wrapping(
            (core, label) in accepted(),
            lead in "[ \t\n]{0,3}",
            trail in "[ \t\n]{0,3}",
            quote in prop_oneof![Just(""), Just("\""), Just("'"), Just("“")],
            dots in "[.]{0,2}",
        ) {
            let raw = format!("{lead}{quote}{core}{quote}{dots}{trail}");
            let p = parse_binary(&raw);
            prop_assert_eq!(p.verdict, Some(Verdict::Binary(label)));
        }

        #[test]
        fn parsers_are_total(raw in "\\PC{0,60}") {
            for task in [Task::ZeroShotBinary, Task::ZeroShotProbabilistic, Task::FewShotBinary] {
                let p = parse_for_task(task, &raw);
                prop_assert_eq!(p.verdict.is_some(), p.status != ParseStatus::Failed);
                if let Some(Verdict::Score(s)) = p.verdict {
                    prop_assert!((0.0..=1.0).contains(&s));
                }
                prop_assert_eq!(parse_for_task(task, &raw), p);
            }
        }
    }
}

use std::collections::{HashMap, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::Message;

// scheme://..., www...., and bare t.me/ links
static URL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(?:\b[a-z][a-z0-9+.\-]*://|\bwww\.|\bt\.me/)\S*").unwrap()
});
// `@name` not glued to a preceding word character (keeps e-mail local parts)
static HANDLE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(^|[^\w@])@\w+").unwrap());
// country code + two check digits + 11..=30 alphanumerics, optionally space-grouped
static IBAN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b[A-Z]{2}[0-9]{2}(?: ?[A-Z0-9]){11,30}\b").unwrap());
static EMOJI: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[\p{Extended_Pictographic}\x{FE0F}\x{200D}\x{1F3FB}-\x{1F3FF}\x{1F1E6}-\x{1F1FF}]")
        .unwrap()
});
static HSPACE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[ \t\x{00A0}]+").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmojiPolicy {
    #[default]
    Keep,
    Strip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum FooterPolicy {
    Keep,
    /// Remove trailing line blocks that recur verbatim at the end of at
    /// least `min_count` messages of the same channel.
    Remove { min_count: usize },
}

impl Default for FooterPolicy {
    fn default() -> Self {
        FooterPolicy::Remove { min_count: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessRules {
    pub remove_urls: bool,
    pub remove_handles: bool,
    pub remove_ibans: bool,
    pub emoji: EmojiPolicy,
    pub footers: FooterPolicy,
}

impl Default for PreprocessRules {
    fn default() -> Self {
        PreprocessRules {
            remove_urls: true,
            remove_handles: true,
            remove_ibans: true,
            emoji: EmojiPolicy::Keep,
            footers: FooterPolicy::default(),
        }
    }
}

fn lines_trimmed(text: &str) -> Vec<&str> {
    text.lines().map(str::trim_end).collect()
}

/// Per-channel set of detected footer blocks.
#[derive(Debug, Clone, Default)]
pub struct FooterIndex {
    by_channel: HashMap<String, HashSet<String>>,
}

impl FooterIndex {
    /// Counts, per channel, how many messages end in each trailing block of
    /// lines (a strict suffix, the body must keep at least one line) and
    /// keeps the blocks seen in at least `min_count` messages.
    pub fn detect<'a>(messages: impl IntoIterator<Item = &'a Message>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, HashMap<String, usize>> = HashMap::new();
        for m in messages {
            let lines = lines_trimmed(&m.text);
            let mut blocks = HashSet::new();
            for start in 1..lines.len() {
                let block = lines[start..].join("\n");
                if !block.trim().is_empty() {
                    blocks.insert(block);
                }
            }
            let channel = counts.entry(m.channel_id.as_str()).or_default();
            for b in blocks {
                *channel.entry(b).or_default() += 1;
            }
        }
        let by_channel = counts
            .into_iter()
            .filter_map(|(channel, blocks)| {
                let kept: HashSet<String> = blocks
                    .into_iter()
                    .filter(|(_, n)| *n >= min_count.max(1))
                    .map(|(b, _)| b)
                    .collect();
                (!kept.is_empty()).then(|| (channel.to_string(), kept))
            })
            .collect();
        FooterIndex { by_channel }
    }

    pub fn is_empty(&self) -> bool {
        self.by_channel.is_empty()
    }

    pub fn footer_count(&self) -> usize {
        self.by_channel.values().map(HashSet::len).sum()
    }

    fn strip(&self, channel: &str, text: &str) -> Option<String> {
        let footers = self.by_channel.get(channel)?;
        let lines = lines_trimmed(text);
        // longest matching trailing block first
        (1..lines.len())
            .find(|&start| footers.contains(&lines[start..].join("\n")))
            .map(|start| lines[..start].join("\n"))
    }
}

/// Applies [`PreprocessRules`] to messages, optionally with a footer index.
#[derive(Debug, Clone, Default)]
pub struct Cleaner {
    rules: PreprocessRules,
    footers: FooterIndex,
}

impl Cleaner {
    pub fn new(rules: PreprocessRules) -> Self {
        Cleaner {
            rules,
            footers: FooterIndex::default(),
        }
    }

    pub fn with_footers(mut self, footers: FooterIndex) -> Self {
        self.footers = footers;
        self
    }

    pub fn rules(&self) -> &PreprocessRules {
        &self.rules
    }

    fn pass(&self, channel: &str, text: &str) -> String {
        let mut text = match self.rules.footers {
            FooterPolicy::Remove { .. } => self
                .footers
                .strip(channel, text)
                .unwrap_or_else(|| text.to_string()),
            FooterPolicy::Keep => text.to_string(),
        };
        if self.rules.remove_urls {
            text = URL.replace_all(&text, "").into_owned();
        }
        if self.rules.remove_handles {
            text = HANDLE.replace_all(&text, "$1").into_owned();
        }
        if self.rules.remove_ibans {
            text = IBAN.replace_all(&text, "").into_owned();
        }
        if self.rules.emoji == EmojiPolicy::Strip {
            text = EMOJI.replace_all(&text, "").into_owned();
        }
        normalize_whitespace(&text)
    }

    /// Cleans `message.text`. Every step only removes content, so passes are
    /// repeated until the text stops changing; the result is a fixpoint and
    /// cleaning it again is a no-op.
    pub fn clean(&self, message: &Message) -> Message {
        let mut text = self.pass(&message.channel_id, &message.text);
        loop {
            let next = self.pass(&message.channel_id, &text);
            if next == text {
                break;
            }
            text = next;
        }
        Message {
            text,
            ..message.clone()
        }
    }
}

/// Collapses horizontal whitespace runs to one space, trims every line and
/// the text as a whole.
fn normalize_whitespace(text: &str) -> String {
    let lines: Vec<String> = text
        .lines()
        .map(|l| HSPACE.replace_all(l, " ").trim().to_string())
        .collect();
    lines.join("\n").trim().to_string()
}

/// Cleans a single message without footer detection (footers need corpus
/// context, see [`preprocess_corpus`]).
pub fn preprocess(message: &Message, rules: &PreprocessRules) -> Message {
    Cleaner::new(rules.clone()).clean(message)
}

/// Cleans a whole corpus. With [`FooterPolicy::Remove`], footers are
/// detected over the given messages first.
pub fn preprocess_corpus(messages: &[Message], rules: &PreprocessRules) -> (Vec<Message>, FooterIndex) {
    let footers = match rules.footers {
        FooterPolicy::Remove { min_count } => FooterIndex::detect(messages, min_count),
        FooterPolicy::Keep => FooterIndex::default(),
    };
    let cleaner = Cleaner::new(rules.clone()).with_footers(footers);
    let cleaned = messages.iter().map(|m| cleaner.clean(m)).collect();
    (cleaned, cleaner.footers)
}

//! Evaluation harness for conspiracy-theory detection in social-media messages.
//!
//! The crate covers the full evaluation loop for prompt-based classifiers:
//!
//! * [`corpus`]: ingest annotated exports, clean text, derive binary labels, split.
//! * [`prompt_kit`]: render zero-shot (binary / probabilistic) and few-shot prompts.
//! * [`sampler`]: build stratified few-shot example sets.
//! * [`gateway`]: run prompts against chat-completion endpoints with a replayable ledger.
//! * [`parsers`]: turn raw model outputs into typed predictions.
//! * [`eval`]: confusion counts, metrics, threshold calibration.
//! * [`stats`]: McNemar, Welch t, run aggregation and disagreement.
//! * [`analysis`]: fragmentation breakdowns and channel-level monitoring reports.
//! * [`cli`]: the `ct-harness` command surface.

pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod parsers;
pub mod prompt_kit;
pub mod sampler;
pub mod stats;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Binary class of a message. `Positive` means the message communicates a
/// conspiracy theory the author believes in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    /// Class index used in reports: 0 = negative, 1 = positive.
    pub fn index(self) -> u8 {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

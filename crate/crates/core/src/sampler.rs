//! Stratified few-shot example sets.
//!
//! Each set holds 7 negatives and 7 positives; the positives follow the
//! component distribution 2 × one component, 3 × two, 2 × three. Sets are
//! drawn independently (they may overlap), each from its own ChaCha stream
//! so set `i` does not depend on how many sets were requested.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledExample;
use crate::Label;

pub const FEW_SHOT_SET_SIZE: usize = 14;
const NEGATIVES_PER_SET: usize = 7;
/// Positives per component count (1, 2, 3).
const POSITIVES_BY_COMPONENTS: [(usize, usize); 3] = [(1, 2), (2, 3), (3, 2)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Negative,
    Positive { components: usize },
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stratum::Negative => f.write_str("negative"),
            Stratum::Positive { components } => write!(f, "positive with {components} component(s)"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("stratum exhausted: {stratum} has {available} items, need {required}")]
    StratumExhausted {
        stratum: Stratum,
        available: usize,
        required: usize,
    },
    #[error("duplicate message id `{0}` in sampling pool")]
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    /// component count -> number of positives
    pub pos_by_components: BTreeMap<usize, usize>,
    pub neg: usize,
}

impl Composition {
    pub fn expected() -> Self {
        Composition {
            pos_by_components: POSITIVES_BY_COMPONENTS.into_iter().collect(),
            neg: NEGATIVES_PER_SET,
        }
    }

    pub fn of(items: &[LabeledExample]) -> Self {
        let mut pos_by_components = BTreeMap::new();
        let mut neg = 0;
        for e in items {
            match e.label {
                Label::Negative => neg += 1,
                Label::Positive => {
                    *pos_by_components.entry(e.component_count().unwrap_or(0)).or_insert(0) += 1;
                }
            }
        }
        Composition { pos_by_components, neg }
    }
}

/// One ordered in-context example set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSet {
    pub set_index: usize,
    pub seed: u64,
    pub source_split: String,
    pub composition: Composition,
    /// Presentation order is a seeded shuffle, not class-blocked.
    pub order: String,
    pub items: Vec<LabeledExample>,
}

impl FewShotSet {
    pub fn from_items(items: Vec<LabeledExample>, seed: u64, source_split: &str) -> Self {
        FewShotSet {
            set_index: 0,
            seed,
            source_split: source_split.to_string(),
            composition: Composition::of(&items),
            order: "shuffled".into(),
            items,
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|e| e.id()).collect()
    }

    /// Checks the size, class balance, component histogram and id uniqueness.
    pub fn verify(&self) -> Result<(), String> {
        if self.items.len() != FEW_SHOT_SET_SIZE {
            return Err(format!("{} items", self.items.len()));
        }
        let actual = Composition::of(&self.items);
        if actual != Composition::expected() {
            return Err(format!("composition {actual:?}"));
        }
        if actual != self.composition {
            return Err("recorded composition does not match items".into());
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.items.iter().find(|e| !seen.insert(e.id())) {
            return Err(format!("duplicate id {}", dup.id()));
        }
        Ok(())
    }
}

/// (stratum, members, items needed per set)
type Strata<'a> = Vec<(Stratum, Vec<&'a LabeledExample>, usize)>;

fn strata(pool: &[LabeledExample]) -> Result<Strata<'_>, SamplerError> {
    let mut seen = HashSet::new();
    for e in pool {
        if !seen.insert(e.id()) {
            return Err(SamplerError::DuplicateId(e.id().to_string()));
        }
    }
    let mut out = Vec::new();
    for (components, need) in POSITIVES_BY_COMPONENTS {
        let members: Vec<_> = pool
            .iter()
            .filter(|e| e.label == Label::Positive && e.component_count() == Some(components))
            .collect();
        out.push((Stratum::Positive { components }, members, need));
    }
    let negatives: Vec<_> = pool.iter().filter(|e| e.label == Label::Negative).collect();
    out.push((Stratum::Negative, negatives, NEGATIVES_PER_SET));
    for (stratum, members, need) in &out {
        if members.len() < *need {
            return Err(SamplerError::StratumExhausted {
                stratum: *stratum,
                available: members.len(),
                required: *need,
            });
        }
    }
    Ok(out)
}

/// Draws `n_sets` independent few-shot sets from `pool`.
pub fn build_few_shot_sets(
    pool: &[LabeledExample],
    n_sets: usize,
    seed: u64,
    source_split: &str,
) -> Result<Vec<FewShotSet>, SamplerError> {
    let strata = strata(pool)?;
    let mut sets = Vec::with_capacity(n_sets);
    for set_index in 0..n_sets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(set_index as u64);
        let mut items: Vec<LabeledExample> = Vec::with_capacity(FEW_SHOT_SET_SIZE);
        for (_, members, need) in &strata {
            let mut picked = index::sample(&mut rng, members.len(), *need).into_vec();
            // index::sample order depends on the algorithm; fix it before shuffling
            picked.sort_unstable();
            items.extend(picked.into_iter().map(|i| members[i].clone()));
        }
        items.shuffle(&mut rng);
        sets.push(FewShotSet {
            set_index,
            seed,
            source_split: source_split.to_string(),
            composition: Composition::of(&items),
            order: "shuffled".into(),
            items,
        });
    }
    Ok(sets)
}

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, LabeledExample};
use crate::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let r = self.as_array();
        let ok = r.iter().all(|x| x.is_finite() && *x >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(CorpusError::InvalidRatios(r))
        }
    }

    /// Largest-remainder apportionment of `n` items; every part is within
    /// one item of `ratio * n` and the parts sum to `n`.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let quotas = self.as_array().map(|r| r * n as f64);
        let mut parts = quotas.map(|q| q.floor() as usize);
        let mut rest = n - parts.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        // stable sort keeps index order on equal remainders
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.partial_cmp(&fa).unwrap()
        });
        for &i in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            if self.as_array()[i] > 0.0 {
                parts[i] += 1;
                rest -= 1;
            }
        }
        parts
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub negative: usize,
    pub positive: usize,
    pub total: usize,
}

impl ClassCounts {
    pub fn of(examples: &[LabeledExample]) -> Self {
        let positive = examples.iter().filter(|e| e.label.is_positive()).count();
        ClassCounts {
            negative: examples.len() - positive,
            positive,
            total: examples.len(),
        }
    }
}

/// Train/validation/test partition of a labeled example set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub seed: u64,
    pub ratios: SplitRatios,
    pub stratified: bool,
}

impl DatasetSplit {
    pub fn counts(&self) -> BTreeMap<&'static str, ClassCounts> {
        BTreeMap::from([
            ("train", ClassCounts::of(&self.train)),
            ("validation", ClassCounts::of(&self.validation)),
            ("test", ClassCounts::of(&self.test)),
        ])
    }

    pub fn part(&self, name: &str) -> Option<&[LabeledExample]> {
        match name {
            "train" => Some(&self.train),
            "validation" | "val" => Some(&self.validation),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Seeded random split. With `stratify`, each class is shuffled and
/// apportioned on its own so per-class counts stay within one item of the
/// ratio. Within each part, examples keep their input order.
pub fn split(
    examples: &[LabeledExample],
    ratios: SplitRatios,
    seed: u64,
    stratify: bool,
) -> Result<DatasetSplit, CorpusError> {
    ratios.validate()?;
    if examples.is_empty() {
        return Err(CorpusError::EmptySplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // assignment[i] = part index of examples[i]
    let mut assignment = vec![0usize; examples.len()];

    let groups: Vec<Vec<usize>> = if stratify {
        let required = ratios.as_array().iter().filter(|r| **r > 0.0).count();
        [Label::Negative, Label::Positive]
            .into_iter()
            .map(|label| {
                let idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].label == label).collect();
                if idx.len() < required {
                    Err(CorpusError::Stratification {
                        label,
                        available: idx.len(),
                        required,
                    })
                } else {
                    Ok(idx)
                }
            })
            .collect::<Result<_, _>>()?
    } else {
        vec![(0..examples.len()).collect()]
    };

    for mut group in groups {
        group.shuffle(&mut rng);
        let [n_train, n_val, _] = ratios.apportion(group.len());
        for (pos, &i) in group.iter().enumerate() {
            assignment[i] = if pos < n_train {
                0
            } else if pos < n_train + n_val {
                1
            } else {
                2
            };
        }
    }

    let mut parts: [Vec<LabeledExample>; 3] = Default::default();
    for (e, &part) in examples.iter().zip(&assignment) {
        parts[part].push(e.clone());
    }
    let [train, validation, test] = parts;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        seed,
        ratios,
        stratified: stratify,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Message;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn corpus(neg: usize, pos: usize) -> Vec<LabeledExample> {
        let ts = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
        (0..neg + pos)
            .map(|i| LabeledExample {
                message: Message::new(format!("m{i}"), "c", ts, format!("text {i}")),
                label: Label::from_bool(i >= neg),
                annotation: None,
            })
            .collect()
    }

    #[test]
    fn table_sized_split() {
        let data = corpus(2344, 1105);
        for stratify in [false, true] {
            let s = split(&data, SplitRatios::default(), 1, stratify).unwrap();
            let sizes = [s.train.len(), s.validation.len(), s.test.len()];
            assert!(sizes[0].abs_diff(2759) <= 1, "{sizes:?}");
            assert!(sizes[1].abs_diff(345) <= 1, "{sizes:?}");
            assert!(sizes[2].abs_diff(345) <= 1, "{sizes:?}");
            assert_eq!(sizes.iter().sum::<usize>(), 3449);
        }
    }

    #[test]
    fn stratified_hundred_each() {
        let s = split(&corpus(100, 100), SplitRatios::default(), 9, true).unwrap();
        let c = s.counts();
        assert_eq!((c["train"].negative, c["train"].positive), (80, 80));
        assert_eq!((c["validation"].negative, c["validation"].positive), (10, 10));
        assert_eq!((c["test"].negative, c["test"].positive), (10, 10));
    }

    #[test]
    fn deterministic_for_seed() {
        let data = corpus(6, 4);
        let a = split(&data, SplitRatios::default(), 5, false).unwrap();
        let b = split(&data, SplitRatios::default(), 5, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stratification_error_on_tiny_class() {
        let err = split(&corpus(10, 2), SplitRatios::default(), 0, true).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::Stratification {
                label: Label::Positive,
                available: 2,
                required: 3
            }
        ));
        assert!(matches!(
            split(&[], SplitRatios::default(), 0, false),
            Err(CorpusError::EmptySplit)
        ));
        let bad = SplitRatios {
            train: 0.5,
            validation: 0.1,
            test: 0.1,
        };
        assert!(matches!(split(&corpus(3, 3), bad, 0, false), Err(CorpusError::InvalidRatios(_))));
    }

    proptest! {
        #[test]
        fn split_is_disjoint_cover(neg in 3usize..120, pos in 3usize..120, seed in any::<u64>(), stratify in any::<bool>()) {
            let data = corpus(neg, pos);
            let s = split(&data, SplitRatios::default(), seed, stratify).unwrap();
            let mut ids = HashSet::new();
            for e in s.train.iter().chain(&s.validation).chain(&s.test) {
                prop_assert!(ids.insert(e.id().to_string()));
            }
            prop_assert_eq!(ids.len(), data.len());
            if stratify {
                let c = s.counts();
                for (name, r) in [("train", 0.8), ("validation", 0.1), ("test", 0.1)] {
                    prop_assert!((c[name].negative as f64 - r * neg as f64).abs() <= 1.0);
                    prop_assert!((c[name].positive as f64 - r * pos as f64).abs() <= 1.0);
                }
            }
            prop_assert_eq!(split(&data, SplitRatios::default(), seed, stratify).unwrap(), s);
        }
    }
}

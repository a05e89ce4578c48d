//! Confusion counts, per-class metrics, threshold calibration and reports.
//!
//! Class 1 is the positive class. Rates with a zero denominator are reported
//! as 0 and listed in [`EvalReport::degenerate`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledExample;
use crate::parsers::{Prediction, Verdict};
use crate::Label;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("gold has {gold} items, predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("misaligned at position {index}: gold `{gold_id}` vs prediction `{pred_id}`")]
    Alignment {
        index: usize,
        gold_id: String,
        pred_id: String,
    },
    #[error("no prediction for {} gold item(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),
    #[error("{} prediction(s) for unknown message ids: {}", .0.len(), .0.join(", "))]
    UnknownPredictions(Vec<String>),
    #[error("prediction for `{0}` is a score; a threshold is required")]
    NeedsThreshold(String),
    #[error("calibration needs at least one positive and one negative gold label")]
    SingleClass,
    #[error("score {0} is not a finite number")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, gold: Label, pred: Label) {
        match (gold, pred) {
            (Label::Positive, Label::Positive) => self.tp += 1,
            (Label::Negative, Label::Positive) => self.fp += 1,
            (Label::Positive, Label::Negative) => self.fn_ += 1,
            (Label::Negative, Label::Negative) => self.tn += 1,
        }
    }
}

pub fn confusion(gold: &[Label], pred: &[Label]) -> Result<ConfusionCounts, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&g, &p) in gold.iter().zip(pred) {
        c.add(g, p);
    }
    Ok(c)
}

/// Like [`confusion`], but both sides carry message ids that must line up.
pub fn confusion_aligned<G: AsRef<str>, P: AsRef<str>>(
    gold: &[(G, Label)],
    pred: &[(P, Label)],
) -> Result<ConfusionCounts, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (index, ((gid, g), (pid, p))) in gold.iter().zip(pred).enumerate() {
        if gid.as_ref() != pid.as_ref() {
            return Err(EvalError::Alignment {
                index,
                gold_id: gid.as_ref().to_string(),
                pred_id: pid.as_ref().to_string(),
            });
        }
        c.add(*g, *p);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub negative: ClassMetrics,
    pub positive: ClassMetrics,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// Names of the rates that hit a zero denominator.
    pub degenerate: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, degenerate: &mut Vec<String>) -> f64 {
    if den == 0 {
        degenerate.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(tp: u64, fp: u64, fn_: u64, class: u8, degenerate: &mut Vec<String>) -> ClassMetrics {
    let precision = ratio(tp, tp + fp, &format!("precision_{class}"), degenerate);
    let recall = ratio(tp, tp + fn_, &format!("recall_{class}"), degenerate);
    // 2tp / (2tp + fp + fn) is the harmonic mean of precision and recall
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_, &format!("f1_{class}"), degenerate);
    ClassMetrics {
        precision,
        recall,
        f1,
        support: tp + fn_,
    }
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let mut degenerate = Vec::new();
    // class 0 by symmetry: its true positives are the true negatives
    let negative = class_metrics(c.tn, c.fn_, c.fp, 0, &mut degenerate);
    let positive = class_metrics(c.tp, c.fp, c.fn_, 1, &mut degenerate);
    let accuracy = ratio(c.tp + c.tn, c.total(), "accuracy", &mut degenerate);
    Metrics {
        macro_f1: (negative.f1 + positive.f1) / 2.0,
        negative,
        positive,
        accuracy,
        degenerate,
    }
}

/// Options controlling how predictions are scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Binarisation threshold for score verdicts.
    pub threshold: Option<f64>,
    /// Count unparsable outputs as negative instead of excluding them.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: BTreeMap<String, String>,
    pub confusion: ConfusionCounts,
    /// Keyed by class index, `"0"` and `"1"`.
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub n_scored: u64,
    pub unparsable: u64,
    pub threshold: Option<f64>,
    pub strict: bool,
    pub degenerate: Vec<String>,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionCounts) -> Self {
        let m = metrics(&confusion);
        EvalReport {
            run: BTreeMap::new(),
            confusion,
            per_class: BTreeMap::from([("0".to_string(), m.negative), ("1".to_string(), m.positive)]),
            macro_f1: m.macro_f1,
            accuracy: m.accuracy,
            n_scored: confusion.total(),
            unparsable: 0,
            threshold: None,
            strict: false,
            degenerate: m.degenerate,
        }
    }

    pub fn class(&self, label: Label) -> &ClassMetrics {
        &self.per_class[&label.index().to_string()]
    }

    /// Flat metric map used for run aggregation.
    pub fn metric_map(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (class, m) in &self.per_class {
            out.insert(format!("precision_{class}"), m.precision);
            out.insert(format!("recall_{class}"), m.recall);
            out.insert(format!("f1_{class}"), m.f1);
        }
        out.insert("f1_macro".into(), self.macro_f1);
        out.insert("accuracy".into(), self.accuracy);
        out
    }
}

/// Scores `predictions` against `gold`. Every gold item needs a prediction
/// and every prediction a gold item. Failed parses are excluded and
/// counted in `unparsable`, or scored negative with `strict`.
pub fn evaluate(gold: &[LabeledExample], predictions: &[Prediction], options: EvalOptions) -> Result<EvalReport, EvalError> {
    let by_id: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.message_id.as_str(), p)).collect();
    let gold_ids: HashSet<&str> = gold.iter().map(|g| g.id()).collect();
    let unknown: Vec<String> = predictions
        .iter()
        .filter(|p| !gold_ids.contains(p.message_id.as_str()))
        .map(|p| p.message_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(EvalError::UnknownPredictions(unknown));
    }
    let missing: Vec<String> = gold
        .iter()
        .filter(|g| !by_id.contains_key(g.id()))
        .map(|g| g.id().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingPredictions(missing));
    }

    let mut confusion = ConfusionCounts::default();
    let mut unparsable = 0;
    for g in gold {
        let p = by_id[g.id()];
        let label = match p.verdict {
            Some(Verdict::Score(_)) if options.threshold.is_none() => {
                return Err(EvalError::NeedsThreshold(p.message_id.clone()))
            }
            Some(v) => v.label(options.threshold),
            None => {
                unparsable += 1;
                options.strict.then_some(Label::Negative)
            }
        };
        if let Some(label) = label {
            confusion.add(g.label, label);
        }
    }
    let mut report = EvalReport::from_confusion(confusion);
    report.unparsable = unparsable;
    report.threshold = options.threshold;
    report.strict = options.strict;
    Ok(report)
}

/// Plain-text table with one column per report: precision, recall and F1
/// per class, macro F1, accuracy.
pub fn render_table(columns: &[(&str, &EvalReport)]) -> String {
    let mut out = String::new();
    let widths: Vec<usize> = columns.iter().map(|(n, _)| n.chars().count().max(8)).collect();
    let _ = write!(out, "{:<10} {:<6}", "Metric", "Class");
    for ((name, _), w) in columns.iter().zip(&widths) {
        let _ = write!(out, " {name:>w$}");
    }
    out.push('\n');
    let rule = 17 + widths.iter().map(|w| w + 1).sum::<usize>();
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    let mut row = |metric: &str, class: &str, f: &dyn Fn(&EvalReport) -> f64| {
        let _ = write!(out, "{metric:<10} {class:<6}");
        for ((_, r), w) in columns.iter().zip(&widths) {
            let _ = write!(out, " {:>w$.3}", f(r));
        }
        out.push('\n');
    };
    row("Precision", "0", &|r| r.class(Label::Negative).precision);
    row("", "1", &|r| r.class(Label::Positive).precision);
    row("Recall", "0", &|r| r.class(Label::Negative).recall);
    row("", "1", &|r| r.class(Label::Positive).recall);
    row("F1 score", "0", &|r| r.class(Label::Negative).f1);
    row("", "1", &|r| r.class(Label::Positive).f1);
    row("", "macro", &|r| r.macro_f1);
    row("Accuracy", "", &|r| r.accuracy);
    let _ = write!(out, "{:<10} {:<6}", "Unparsable", "");
    for ((_, r), w) in columns.iter().zip(&widths) {
        let _ = write!(out, " {:>w$}", r.unparsable);
    }
    out.push('\n');
    out
}

/// Predict positive iff `score >= threshold`.
pub fn binarize(scores: &[f64], threshold: f64) -> Vec<Label> {
    scores.iter().map(|&s| Label::from_bool(s >= threshold)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// F1 of the positive class.
    #[default]
    F1Positive,
    MacroF1,
    /// Youden's J = TPR - FPR.
    Youden,
}

impl Objective {
    fn value(self, c: &ConfusionCounts) -> f64 {
        let m = metrics(c);
        match self {
            Objective::F1Positive => m.positive.f1,
            Objective::MacroF1 => m.macro_f1,
            Objective::Youden => m.positive.recall - (1.0 - m.negative.recall),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub objective: Objective,
    pub objective_value: f64,
    /// Positive-class F1 of the rule `score >= threshold`.
    pub f1_at_threshold: f64,
    /// One point per unique score, thresholds strictly increasing.
    pub curve: Vec<CurvePoint>,
}

/// Confusion counts of `score >= t` for every unique score `t`, ascending.
fn sweep(scored: &[(f64, Label)]) -> Vec<(f64, ConfusionCounts)> {
    let mut sorted: Vec<(f64, Label)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pos = scored.iter().filter(|(_, l)| l.is_positive()).count() as u64;
    let neg = scored.len() as u64 - pos;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1.is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((
            t,
            ConfusionCounts {
                tp,
                fp,
                fn_: pos - tp,
                tn: neg - fp,
            },
        ));
    }
    out.reverse();
    out
}

/// Picks the unique score maximising `objective` for the rule
/// `score >= t`; ties go to the larger threshold.
pub fn optimize_threshold(scored: &[(f64, Label)], objective: Objective) -> Result<ThresholdResult, EvalError> {
    if let Some(&(s, _)) = scored.iter().find(|(s, _)| !s.is_finite()) {
        return Err(EvalError::NonFinite(s));
    }
    let pos = scored.iter().filter(|(_, l)| l.is_positive()).count();
    if pos == 0 || pos == scored.len() {
        return Err(EvalError::SingleClass);
    }
    let points = sweep(scored);
    let mut best: Option<(f64, f64, ConfusionCounts)> = None;
    let mut curve = Vec::with_capacity(points.len());
    for (t, c) in points {
        let m = metrics(&c);
        curve.push(CurvePoint {
            threshold: t,
            precision: m.positive.precision,
            recall: m.positive.recall,
            f1: m.positive.f1,
        });
        let v = objective.value(&c);
        if best.is_none_or(|(_, bv, _)| v >= bv) {
            best = Some((t, v, c));
        }
    }
    let (threshold, objective_value, c) = best.expect("at least one candidate");
    Ok(ThresholdResult {
        threshold,
        objective,
        objective_value,
        f1_at_threshold: metrics(&c).positive.f1,
        curve,
    })
}

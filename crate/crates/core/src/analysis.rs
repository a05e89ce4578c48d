//! Fragmentation breakdowns and channel-level monitoring reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{fragmentation_score, LabeledExample, Message};
use crate::parsers::{Prediction, Verdict};

/// Default minimum channel size for the ranking view.
pub const DEFAULT_MIN_MESSAGES: usize = 500;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{} prediction(s) reference unknown message ids: {}", .0.len(), .0.join(", "))]
    UnresolvedIds(Vec<String>),
    #[error("no prediction for {} gold item(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),
    #[error("writing {path}: {message}")]
    Write { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentRow {
    pub n: usize,
    /// Items without a usable verdict.
    pub unparsable: usize,
    pub detected: usize,
    /// `detected / (n - unparsable)`; absent when no item could be labeled.
    pub detection_rate: Option<f64>,
    /// Mean raw probability; absent for binary runs.
    pub mean_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentationBreakdown {
    /// Keyed by fragmentation score 0, 1, 2.
    pub per_score: BTreeMap<u8, FragmentRow>,
    pub grouping: String,
    pub threshold: Option<f64>,
    /// Positive gold items without components.
    pub excluded: usize,
}

fn index_predictions(preds: &[Prediction]) -> HashMap<&str, &Prediction> {
    preds.iter().map(|p| (p.message_id.as_str(), p)).collect()
}

/// Groups positive gold items by fragmentation score (3 minus the number of
/// annotated components) and reports per group how many were detected and,
/// for probabilistic runs, the mean score. Scores are binarised with
/// `threshold`; without one, only binary verdicts count as detections.
pub fn breakdown_by_fragmentation(
    preds: &[Prediction],
    gold: &[LabeledExample],
    threshold: Option<f64>,
) -> Result<FragmentationBreakdown, AnalysisError> {
    let by_id = index_predictions(preds);
    let mut per_score: BTreeMap<u8, (FragmentRow, Vec<f64>)> = (0..3)
        .map(|s| {
            let row = FragmentRow {
                n: 0,
                unparsable: 0,
                detected: 0,
                detection_rate: None,
                mean_score: None,
            };
            (s, (row, Vec::new()))
        })
        .collect();
    let mut excluded = 0;
    let mut missing = Vec::new();
    for g in gold.iter().filter(|g| g.label.is_positive()) {
        let Some(score) = g.annotation.as_ref().and_then(|a| fragmentation_score(a).ok()) else {
            excluded += 1;
            continue;
        };
        let Some(p) = by_id.get(g.id()) else {
            missing.push(g.id().to_string());
            continue;
        };
        let (row, scores) = per_score.get_mut(&score).expect("scores 0..=2");
        row.n += 1;
        if let Some(Verdict::Score(s)) = p.verdict {
            scores.push(s);
        }
        match p.verdict.and_then(|v| v.label(threshold)) {
            Some(label) => row.detected += usize::from(label.is_positive()),
            None => row.unparsable += 1,
        }
    }
    if !missing.is_empty() {
        return Err(AnalysisError::MissingPredictions(missing));
    }
    let per_score = per_score
        .into_iter()
        .map(|(k, (mut row, scores))| {
            let labeled = row.n - row.unparsable;
            row.detection_rate = (labeled > 0).then(|| row.detected as f64 / labeled as f64);
            row.mean_score = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
            (k, row)
        })
        .collect();
    Ok(FragmentationBreakdown {
        per_score,
        grouping: "positive gold items by fragmentation score (3 - annotated components); detection_rate = share predicted positive; mean_score = mean raw probability".into(),
        threshold,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRow {
    pub channel_id: String,
    pub n_messages: usize,
    pub n_positive: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelOverall {
    /// Unweighted mean of the row shares; absent when no channel passes the filter.
    pub mean_share_per_channel: Option<f64>,
    /// Positives over messages across all channels, before filtering.
    pub pooled_share: f64,
    pub n_channels: usize,
    pub n_messages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    /// Sorted by share descending, then channel id.
    pub rows: Vec<ChannelRow>,
    pub min_messages: usize,
    pub overall: ChannelOverall,
    /// Predictions without a usable verdict, left out of every count.
    pub unparsable: usize,
}

/// Per-channel share of messages classified positive.
pub fn channel_report(
    preds: &[Prediction],
    messages: &[Message],
    min_messages: usize,
    threshold: Option<f64>,
) -> Result<ChannelReport, AnalysisError> {
    let channel_of: HashMap<&str, &str> = messages.iter().map(|m| (m.id.as_str(), m.channel_id.as_str())).collect();
    let unresolved: Vec<String> = preds
        .iter()
        .filter(|p| !channel_of.contains_key(p.message_id.as_str()))
        .map(|p| p.message_id.clone())
        .collect();
    if !unresolved.is_empty() {
        return Err(AnalysisError::UnresolvedIds(unresolved));
    }
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut unparsable = 0;
    for p in preds {
        let Some(label) = p.label(threshold) else {
            unparsable += 1;
            continue;
        };
        let c = counts.entry(channel_of[p.message_id.as_str()]).or_default();
        c.0 += 1;
        c.1 += usize::from(label.is_positive());
    }
    let total: usize = counts.values().map(|c| c.0).sum();
    let positives: usize = counts.values().map(|c| c.1).sum();
    let mut rows: Vec<ChannelRow> = counts
        .iter()
        .filter(|(_, c)| c.0 >= min_messages)
        .map(|(id, &(n, pos))| ChannelRow {
            channel_id: id.to_string(),
            n_messages: n,
            n_positive: pos,
            share: pos as f64 / n as f64,
        })
        .collect();
    rows.sort_by(|a, b| b.share.total_cmp(&a.share).then_with(|| a.channel_id.cmp(&b.channel_id)));
    let mean_share_per_channel = (!rows.is_empty()).then(|| rows.iter().map(|r| r.share).sum::<f64>() / rows.len() as f64);
    Ok(ChannelReport {
        rows,
        min_messages,
        overall: ChannelOverall {
            mean_share_per_channel,
            pooled_share: if total == 0 { 0.0 } else { positives as f64 / total as f64 },
            n_channels: counts.len(),
            n_messages: total,
        },
        unparsable,
    })
}

impl ChannelReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), AnalysisError> {
        let err = |e: csv::Error| AnalysisError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for row in &self.rows {
            w.serialize(row).map_err(err)?;
        }
        w.flush().map_err(|e| err(e.into()))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>10} {:>10} {:>8}", "Channel", "Messages", "Positive", "Share");
        for r in &self.rows {
            let _ = writeln!(out, "{:<24} {:>10} {:>10} {:>7.2}%", r.channel_id, r.n_messages, r.n_positive, 100.0 * r.share);
        }
        let mean = self.overall.mean_share_per_channel.map_or("n/a".to_string(), |m| format!("{:.2}%", 100.0 * m));
        let _ = writeln!(out, "mean share per channel (>= {} messages): {mean}", self.min_messages);
        let _ = writeln!(
            out,
            "pooled share over {} channels / {} messages: {:.2}%",
            self.overall.n_channels,
            self.overall.n_messages,
            100.0 * self.overall.pooled_share
        );
        out
    }
}

impl FragmentationBreakdown {
    pub fn render(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>6} {:>10} {:>11}", "Fragmentation", "n", "Detected", "Mean score");
        for (score, r) in &self.per_score {
            let _ = writeln!(out, "{:<14} {:>6} {:>10} {:>11}", score, r.n, opt(r.detection_rate), opt(r.mean_score));
        }
        let _ = writeln!(out, "excluded (no components): {}", self.excluded);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Annotation, Component};
    use crate::Label;
    use chrono::DateTime;

    fn positive(id: &str, components: usize) -> LabeledExample {
        let mut a = Annotation::believed(Component::ALL.into_iter().take(components));
        if components == 0 {
            a.components.clear();
        }
        LabeledExample {
            message: Message::new(id, "c", DateTime::UNIX_EPOCH, "text"),
            label: Label::Positive,
            annotation: Some(a),
        }
    }

    fn strata(detected: [usize; 3]) -> (Vec<LabeledExample>, Vec<Prediction>) {
        let mut gold = Vec::new();
        let mut preds = Vec::new();
        for (score, hits) in detected.into_iter().enumerate() {
            for i in 0..10 {
                let id = format!("f{score}-{i}");
                gold.push(positive(&id, 3 - score));
                preds.push(Prediction::imported(&id, Verdict::Binary(Label::from_bool(i < hits))));
            }
        }
        (gold, preds)
    }

    #[test]
    fn counting_per_stratum() {
        let (gold, preds) = strata([8, 6, 5]);
        let b = breakdown_by_fragmentation(&preds, &gold, None).unwrap();
        assert_eq!(b.per_score[&0].detection_rate, Some(0.8));
        assert_eq!(b.per_score[&1].detection_rate, Some(0.6));
        assert_eq!(b.per_score[&2].detection_rate, Some(0.5));
        assert_eq!(b.per_score.values().map(|r| r.n).sum::<usize>(), 30);

        let (gold, preds) = strata([10, 10, 10]);
        let b = breakdown_by_fragmentation(&preds, &gold, None).unwrap();
        assert!(b.per_score.values().all(|r| r.detection_rate == Some(1.0)));
    }

    #[test]
    fn mean_scores_and_exclusions() {
        let mut gold = vec![positive("a", 3), positive("b", 3), positive("c", 1), positive("z", 0)];
        gold.push(LabeledExample {
            label: Label::Negative,
            annotation: Some(Annotation::negative()),
            ..positive("n", 1)
        });
        let preds = vec![
            Prediction::imported("a", Verdict::Score(0.70)),
            Prediction::imported("b", Verdict::Score(0.86)),
            Prediction::imported("c", Verdict::Score(0.63)),
        ];
        let b = breakdown_by_fragmentation(&preds, &gold, Some(0.7)).unwrap();
        assert!((b.per_score[&0].mean_score.unwrap() - 0.78).abs() < 1e-12);
        assert_eq!(b.per_score[&2].mean_score, Some(0.63));
        assert_eq!(b.per_score[&0].detection_rate, Some(1.0));
        assert_eq!(b.per_score[&2].detection_rate, Some(0.0));
        assert_eq!(b.per_score[&1].n, 0);
        assert_eq!(b.excluded, 1);
        assert!(b.render().contains("0.78"));

        assert!(matches!(
            breakdown_by_fragmentation(&preds[..2], &gold, None),
            Err(AnalysisError::MissingPredictions(ids)) if ids == vec!["c".to_string()]
        ));
    }

    fn channel_corpus(channels: &[(&str, usize, usize)]) -> (Vec<Message>, Vec<Prediction>) {
        let mut messages = Vec::new();
        let mut preds = Vec::new();
        for &(ch, n, pos) in channels {
            for i in 0..n {
                let id = format!("{ch}-{i}");
                messages.push(Message::new(&id, ch, DateTime::UNIX_EPOCH, "text"));
                preds.push(Prediction::imported(&id, Verdict::Binary(Label::from_bool(i < pos))));
            }
        }
        (messages, preds)
    }

    #[test]
    fn channel_shares() {
        let (m, p) = channel_corpus(&[("freiAuf", 100, 40), ("big", 1000, 50), ("small", 10, 1)]);
        let r = channel_report(&p, &m, 50, None).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].channel_id, "freiAuf");
        assert_eq!(r.rows[0].share, 0.4);
        assert_eq!(r.overall.pooled_share, 91.0 / 1110.0);
        assert_eq!(r.overall.mean_share_per_channel, Some((0.4 + 0.05) / 2.0));
        assert_eq!(r.overall.n_messages, m.len());

        let none = channel_report(&p, &m, 5000, None).unwrap();
        assert!(none.rows.is_empty());
        assert_eq!(none.overall.mean_share_per_channel, None);
        assert_eq!(none.overall.pooled_share, r.overall.pooled_share);
    }

    #[test]
    fn unresolved_ids_listed() {
        let (m, mut p) = channel_corpus(&[("a", 3, 1)]);
        p.push(Prediction::imported("ghost", Verdict::Binary(Label::Positive)));
        assert!(matches!(channel_report(&p, &m, 1, None), Err(AnalysisError::UnresolvedIds(ids)) if ids == vec!["ghost".to_string()]));
    }

    #[test]
    fn ties_sorted_by_id_and_csv() {
        let (m, p) = channel_corpus(&[("b", 10, 5), ("a", 10, 5), ("c", 10, 9)]);
        let r = channel_report(&p, &m, 1, None).unwrap();
        let ids: Vec<_> = r.rows.iter().map(|r| r.channel_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("channels.csv");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("channel_id,n_messages,n_positive,share\nc,10,9,0.9\n"));
        assert!(r.render().contains("pooled share"));
    }
}

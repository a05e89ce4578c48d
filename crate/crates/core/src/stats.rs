//! Significance tests and run aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::eval::EvalReport;
use crate::Label;

/// Below this many discordant pairs McNemar uses the exact binomial test.
pub const MCNEMAR_EXACT_BELOW: u64 = 25;
/// Within this distance of the switch point both variants are reported.
const BOUNDARY_WINDOW: u64 = 5;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {required} values, got {actual}")]
    TooFewValues { required: usize, actual: usize },
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("inputs differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("misaligned at position {index}: `{left}` vs `{right}`")]
    Alignment { index: usize, left: String, right: String },
    #[error("report {index} has metric keys {found:?}, expected {expected:?}")]
    HeterogeneousKeys {
        index: usize,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    McnemarExact,
    McnemarChi2,
    WelchT,
    PairedT,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlternateResult {
    pub method: TestMethod,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: TestMethod,
    pub statistic: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub significant: bool,
    /// Set when the test has no information (no discordant pairs, zero variance).
    pub degenerate: bool,
    /// Degrees of freedom for t tests.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub df: Option<f64>,
    /// The other McNemar variant, reported near the exact/χ² switch point.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alternate: Option<AlternateResult>,
}

impl TestResult {
    fn new(method: TestMethod, statistic: f64, p_value: f64, alpha: f64) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        TestResult {
            method,
            statistic,
            p_value,
            alpha,
            significant: p_value < alpha,
            degenerate: false,
            df: None,
            alternate: None,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<(), StatsError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(StatsError::InvalidAlpha(alpha))
    }
}

/// Counts of (model A correct?, model B correct?) over a shared test set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedOutcomes {
    pub n00: u64,
    /// A wrong, B correct.
    pub n01: u64,
    /// A correct, B wrong.
    pub n10: u64,
    pub n11: u64,
}

impl PairedOutcomes {
    pub fn from_labels(gold: &[Label], a: &[Label], b: &[Label]) -> Result<Self, StatsError> {
        if gold.len() != a.len() {
            return Err(StatsError::LengthMismatch(gold.len(), a.len()));
        }
        if gold.len() != b.len() {
            return Err(StatsError::LengthMismatch(gold.len(), b.len()));
        }
        let mut p = PairedOutcomes::default();
        for ((g, x), y) in gold.iter().zip(a).zip(b) {
            match (x == g, y == g) {
                (false, false) => p.n00 += 1,
                (false, true) => p.n01 += 1,
                (true, false) => p.n10 += 1,
                (true, true) => p.n11 += 1,
            }
        }
        Ok(p)
    }

    pub fn total(&self) -> u64 {
        self.n00 + self.n01 + self.n10 + self.n11
    }

    pub fn swapped(&self) -> Self {
        PairedOutcomes {
            n00: self.n00,
            n01: self.n10,
            n10: self.n01,
            n11: self.n11,
        }
    }
}

/// Two-sided exact binomial p for `b` vs `c` discordant pairs.
pub fn mcnemar_exact_p(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    if n < 100 {
        // exact integer tail over 2^n
        let mut coef: u128 = 1;
        let mut tail: u128 = 0;
        for i in 0..=k {
            if i > 0 {
                coef = coef * u128::from(n - i + 1) / u128::from(i);
            }
            tail += coef;
        }
        let p = 2.0 * (tail as f64) / 2f64.powi(n as i32);
        return p.min(1.0);
    }
    // log-space for large n
    let ln2n = n as f64 * std::f64::consts::LN_2;
    let mut ln_coef = 0.0f64;
    let mut tail = 0.0f64;
    for i in 0..=k {
        if i > 0 {
            ln_coef += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_coef - ln2n).exp();
    }
    (2.0 * tail).min(1.0)
}

/// Continuity-corrected statistic `(|b - c| - 1)^2 / (b + c)` and its χ²(1) p.
pub fn mcnemar_chi2(b: u64, c: u64) -> (f64, f64) {
    let n = b + c;
    if n == 0 {
        return (0.0, 1.0);
    }
    let d = b.abs_diff(c) as f64 - 1.0;
    let stat = d * d / n as f64;
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    (stat, chi.sf(stat))
}

/// McNemar's test on discordant pairs `b = n10`, `c = n01`: exact
/// binomial when `b + c < 25`, continuity-corrected χ² otherwise.
pub fn mcnemar(pairs: &PairedOutcomes, alpha: f64) -> Result<TestResult, StatsError> {
    check_alpha(alpha)?;
    let (b, c) = (pairs.n10, pairs.n01);
    let n = b + c;
    let exact = || AlternateResult {
        method: TestMethod::McnemarExact,
        statistic: b.min(c) as f64,
        p_value: mcnemar_exact_p(b, c),
    };
    let chi2 = || {
        let (statistic, p_value) = mcnemar_chi2(b, c);
        AlternateResult {
            method: TestMethod::McnemarChi2,
            statistic,
            p_value,
        }
    };
    let (primary, other) = if n < MCNEMAR_EXACT_BELOW {
        (exact(), chi2())
    } else {
        (chi2(), exact())
    };
    let mut r = TestResult::new(primary.method, primary.statistic, primary.p_value, alpha);
    r.degenerate = n == 0;
    if n > 0 && n.abs_diff(MCNEMAR_EXACT_BELOW) <= BOUNDARY_WINDOW {
        r.alternate = Some(other);
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub sd: f64,
    pub n: usize,
}

/// Mean and sample SD. Values are summed in sorted order so the result
/// does not depend on input order.
pub fn mean_sd(values: &[f64]) -> Result<MeanSd, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFewValues {
            required: 2,
            actual: values.len(),
        });
    }
    if let Some(&v) = values.iter().find(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(v));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let var = dev.iter().sum::<f64>() / (n - 1.0);
    Ok(MeanSd {
        mean,
        sd: var.sqrt(),
        n: sorted.len(),
    })
}

fn t_result(method: TestMethod, diff: f64, se: f64, df: f64, alpha: f64) -> TestResult {
    if se == 0.0 {
        // no spread: identical means carry no evidence, distinct means are certain
        let (statistic, p) = if diff == 0.0 { (0.0, 1.0) } else { (diff.signum() * f64::INFINITY, 0.0) };
        let mut r = TestResult::new(method, statistic, p, alpha);
        r.degenerate = true;
        r.df = Some(df);
        return r;
    }
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let mut r = TestResult::new(method, t, 2.0 * dist.sf(t.abs()), alpha);
    r.df = Some(df);
    r
}

/// Welch's unequal-variance t test, `t = (mean_a - mean_b) / se`, with
/// Welch-Satterthwaite degrees of freedom and a two-sided p.
pub fn welch_t(a: &[f64], b: &[f64], alpha: f64) -> Result<TestResult, StatsError> {
    check_alpha(alpha)?;
    let (ma, mb) = (mean_sd(a)?, mean_sd(b)?);
    let va = ma.sd * ma.sd / ma.n as f64;
    let vb = mb.sd * mb.sd / mb.n as f64;
    let se = (va + vb).sqrt();
    let df_den = va * va / (ma.n as f64 - 1.0) + vb * vb / (mb.n as f64 - 1.0);
    let df = if df_den > 0.0 { (va + vb).powi(2) / df_den } else { (ma.n + mb.n - 2) as f64 };
    Ok(t_result(TestMethod::WelchT, ma.mean - mb.mean, se, df, alpha))
}

/// Paired t test over per-run differences `a[i] - b[i]`, e.g. two models
/// evaluated with the same few-shot sets.
pub fn paired_t(a: &[f64], b: &[f64], alpha: f64) -> Result<TestResult, StatsError> {
    check_alpha(alpha)?;
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let d = mean_sd(&diffs)?;
    let se = d.sd / (d.n as f64).sqrt();
    Ok(t_result(TestMethod::PairedT, d.mean, se, (d.n - 1) as f64, alpha))
}

/// Per-metric mean and sample SD across runs.
pub fn aggregate_metric_maps(runs: &[BTreeMap<String, f64>]) -> Result<BTreeMap<String, MeanSd>, StatsError> {
    if runs.len() < 2 {
        return Err(StatsError::TooFewValues {
            required: 2,
            actual: runs.len(),
        });
    }
    let keys: Vec<String> = runs[0].keys().cloned().collect();
    for (index, run) in runs.iter().enumerate().skip(1) {
        if !run.keys().eq(keys.iter()) {
            return Err(StatsError::HeterogeneousKeys {
                index,
                expected: keys,
                found: run.keys().cloned().collect(),
            });
        }
    }
    keys.iter()
        .map(|k| {
            let values: Vec<f64> = runs.iter().map(|r| r[k]).collect();
            Ok((k.clone(), mean_sd(&values)?))
        })
        .collect()
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<BTreeMap<String, MeanSd>, StatsError> {
    let maps: Vec<_> = reports.iter().map(EvalReport::metric_map).collect();
    aggregate_metric_maps(&maps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub rate: f64,
    pub n: usize,
    pub ids: Vec<String>,
}

/// Share of aligned items on which two prediction lists differ.
pub fn disagreement<A: AsRef<str>, B: AsRef<str>>(a: &[(A, Label)], b: &[(B, Label)]) -> Result<Disagreement, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::TooFewValues { required: 1, actual: 0 });
    }
    let mut ids = Vec::new();
    for (index, ((ia, la), (ib, lb))) in a.iter().zip(b).enumerate() {
        if ia.as_ref() != ib.as_ref() {
            return Err(StatsError::Alignment {
                index,
                left: ia.as_ref().to_string(),
                right: ib.as_ref().to_string(),
            });
        }
        if la != lb {
            ids.push(ia.as_ref().to_string());
        }
    }
    Ok(Disagreement {
        rate: ids.len() as f64 / a.len() as f64,
        n: a.len(),
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pairs(b: u64, c: u64) -> PairedOutcomes {
        PairedOutcomes { n00: 3, n01: c, n10: b, n11: 40 }
    }

    /// P[Bin(n, 1/2) <= k] summed term by term with f64 binomials.
    fn binom_oracle(b: u64, c: u64) -> f64 {
        let n = b + c;
        let k = b.min(c);
        let mut total = 0.0;
        for i in 0..=k {
            let mut coef = 1.0f64;
            for j in 0..i {
                coef *= (n - j) as f64 / (j + 1) as f64;
            }
            total += coef * 0.5f64.powi(n as i32);
        }
        (2.0 * total).min(1.0)
    }

    #[test]
    fn exact_small_example() {
        let r = mcnemar(&pairs(10, 2), 0.05).unwrap();
        assert_eq!(r.method, TestMethod::McnemarExact);
        assert_eq!(r.p_value, 158.0 / 4096.0);
        assert!(r.significant);
        assert!(r.alternate.is_none());
    }

    #[test]
    fn exact_matches_oracle() {
        for n in 1..=24u64 {
            for b in 0..=n {
                let p = mcnemar_exact_p(b, n - b);
                assert_abs_diff_eq!(p, binom_oracle(b, n - b), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn chi2_example() {
        let r = mcnemar(&pairs(40, 20), 0.05).unwrap();
        assert_eq!(r.method, TestMethod::McnemarChi2);
        assert_abs_diff_eq!(r.statistic, 361.0 / 60.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_value, 0.014171, epsilon = 1e-5);
        assert!(r.significant);
    }

    #[test]
    fn balanced_and_empty() {
        let r = mcnemar(&pairs(6, 6), 0.05).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(!r.significant);
        let r = mcnemar(&pairs(0, 0), 0.05).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
        assert!(mcnemar(&pairs(1, 1), 1.5).is_err());
    }

    #[test]
    fn boundary_reports_both() {
        let r = mcnemar(&pairs(18, 9), 0.05).unwrap();
        assert_eq!(r.method, TestMethod::McnemarChi2);
        assert_eq!(r.alternate.unwrap().method, TestMethod::McnemarExact);
    }

    #[test]
    fn boundary_sweep_agreement() {
        // unequal discordant counts: the corrected χ² tracks the exact test closely
        for n in 25..=40u64 {
            for b in 0..=n {
                let c = n - b;
                if b == c {
                    continue;
                }
                let (_, p_chi) = mcnemar_chi2(b, c);
                let d = (p_chi - mcnemar_exact_p(b, c)).abs();
                assert!(d <= 0.02, "b={b} c={c} diff={d}");
            }
        }
    }

    #[test]
    fn boundary_sweep_balanced_tables_agree_on_decision() {
        // b == c: exact p is 1 while the corrected χ² gives about 0.85
        for half in 13..=20u64 {
            let (_, p_chi) = mcnemar_chi2(half, half);
            assert_eq!(mcnemar_exact_p(half, half), 1.0);
            assert!(p_chi > 0.8);
        }
    }

    #[test]
    fn welch_example() {
        // two points at mean ± s·sqrt((n-1)/n) give sample SD s exactly
        let mk = |mean: f64, sd: f64| -> Vec<f64> {
            let h = sd * (9.0f64 / 10.0).sqrt();
            (0..10).map(|i| if i % 2 == 0 { mean - h } else { mean + h }).collect()
        };
        let (a, b) = (mk(0.68, 0.02), mk(0.70, 0.03));
        let ma = mean_sd(&a).unwrap();
        assert_abs_diff_eq!(ma.sd, 0.02, epsilon = 1e-12);
        let r = welch_t(&a, &b, 0.05).unwrap();
        let oracle = (0.68 - 0.70) / ((0.02f64.powi(2) + 0.03f64.powi(2)) / 10.0).sqrt();
        assert_abs_diff_eq!(r.statistic, oracle, epsilon = 1e-9);
        assert_abs_diff_eq!(r.statistic.abs(), 1.754, epsilon = 1e-3);
        assert!(!r.significant);
        let df = r.df.unwrap();
        assert!(df > 15.0 && df < 18.0, "{df}");
    }

    #[test]
    fn welch_identical_and_degenerate() {
        let a = [0.1, 0.2, 0.3];
        let r = welch_t(&a, &a, 0.05).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);
        let r = welch_t(&[0.5, 0.5], &[0.5, 0.5, 0.5], 0.05).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
        assert!(matches!(welch_t(&[0.5], &a, 0.05), Err(StatsError::TooFewValues { .. })));
    }

    #[test]
    fn paired_t_basics() {
        let a = [0.70, 0.72, 0.69, 0.71];
        let b = [0.68, 0.69, 0.68, 0.70];
        let r = paired_t(&a, &b, 0.05).unwrap();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let m = d.iter().sum::<f64>() / 4.0;
        let s = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert_abs_diff_eq!(r.statistic, m / (s / 2.0), epsilon = 1e-9);
        assert_eq!(r.df, Some(3.0));
    }

    #[test]
    fn aggregation_examples() {
        let runs: Vec<BTreeMap<String, f64>> = (0..10)
            .map(|i| BTreeMap::from([("f1_1".to_string(), if i < 5 { 0.66 } else { 0.70 })]))
            .collect();
        let agg = aggregate_metric_maps(&runs).unwrap();
        let oracle_sd = (10.0 * 0.02f64.powi(2) / 9.0).sqrt();
        assert_abs_diff_eq!(agg["f1_1"].mean, 0.68, epsilon = 1e-12);
        assert_abs_diff_eq!(agg["f1_1"].sd, oracle_sd, epsilon = 1e-12);
        assert_abs_diff_eq!(agg["f1_1"].sd, 0.0211, epsilon = 1e-4);

        let same = vec![runs[0].clone(); 10];
        assert_eq!(aggregate_metric_maps(&same).unwrap()["f1_1"].sd, 0.0);

        let mut bad = runs.clone();
        bad[3].insert("extra".into(), 1.0);
        assert!(matches!(aggregate_metric_maps(&bad), Err(StatsError::HeterogeneousKeys { index: 3, .. })));
    }

    #[test]
    fn disagreement_examples() {
        let a: Vec<(String, Label)> = (0..345).map(|i| (format!("m{i}"), Label::Negative)).collect();
        let mut b = a.clone();
        for item in b.iter_mut().take(52) {
            item.1 = Label::Positive;
        }
        let d = disagreement(&a, &b).unwrap();
        assert_eq!(d.ids.len(), 52);
        assert_abs_diff_eq!(d.rate, 52.0 / 345.0, epsilon = 1e-15);
        assert_eq!(disagreement(&a, &a).unwrap().rate, 0.0);
        b.swap(0, 1);
        assert!(matches!(disagreement(&a, &b), Err(StatsError::Alignment { index: 0, .. })));
    }

    proptest! {
        #[test]
        fn mcnemar_symmetric(b in 0u64..200, c in 0u64..200) {
            let x = mcnemar(&pairs(b, c), 0.05).unwrap();
            let y = mcnemar(&pairs(b, c).swapped(), 0.05).unwrap();
            prop_assert_eq!(x.p_value, y.p_value);
            prop_assert_eq!(x.statistic, y.statistic);
            prop_assert_eq!(x.significant, x.p_value < 0.05);
        }

        #[test]
        fn welch_antisymmetric(a in prop::collection::vec(0.0f64..1.0, 2..12), b in prop::collection::vec(0.0f64..1.0, 2..12)) {
            let x = welch_t(&a, &b, 0.05).unwrap();
            let y = welch_t(&b, &a, 0.05).unwrap();
            prop_assert_eq!(x.statistic, -y.statistic);
            prop_assert_eq!(x.p_value, y.p_value);
        }

        #[test]
        fn aggregation_order_free(mut values in prop::collection::vec(0.0f64..1.0, 2..12), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let before = mean_sd(&values).unwrap();
            values.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(mean_sd(&values).unwrap(), before);
        }
    }
}

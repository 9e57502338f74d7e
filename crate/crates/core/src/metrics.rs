//! Confidence quality: AUROC, equal-mass ECE and per-bin tables.
//!
//! Equal-mass binning sorts records by ascending confidence (ties broken by
//! ascending id), then hands `ceil(n / bins)` records to each of the first
//! `n % bins` bins and `floor(n / bins)` to the rest. A bin left empty
//! (`n < bins`) reports zero means and carries no weight.
//!
//! Records with exactly equal confidence share their group's accuracy when a
//! tie group straddles a bin boundary; a constant-confidence run therefore
//! has `ECE = |confidence - accuracy|` regardless of record ids.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{ConfidenceFlag, Method};
use crate::fixed;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no records")]
    EmptyInput,
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("AUROC needs at least one correct and one incorrect record")]
    DegenerateClasses,
    #[error("every bin is empty")]
    AllEmptyBins,
    #[error("retrieval rate is zero; efficiency is undefined")]
    ZeroRetrieval,
    #[error("invalid value for {field}: {value}")]
    InvalidValue { field: &'static str, value: f64 },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Reference answer: a single label or a list of acceptable strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    One(String),
    Many(Vec<String>),
}

impl Gold {
    pub fn answers(&self) -> &[String] {
        match self {
            Gold::One(s) => std::slice::from_ref(s),
            Gold::Many(v) => v,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.answers().iter().all(|s| s.trim().is_empty())
    }
}

impl From<&str> for Gold {
    fn from(s: &str) -> Self {
        Gold::One(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFlag {
    AnchorMissingYes,
    AnchorMissingNo,
    FallbackNeutral,
    /// Missing-anchor policy was `error` and both anchors were absent.
    AnchorTokensAbsent,
    /// Missing-anchor policy was `skip`; excluded from metrics.
    Skipped,
    NoNumberFound,
    NoLabelTokenPresent,
    RequestFailed,
    RetrievalMiss,
}

impl From<ConfidenceFlag> for RecordFlag {
    fn from(f: ConfidenceFlag) -> Self {
        match f {
            ConfidenceFlag::AnchorMissingYes => RecordFlag::AnchorMissingYes,
            ConfidenceFlag::AnchorMissingNo => RecordFlag::AnchorMissingNo,
            ConfidenceFlag::FallbackNeutral => RecordFlag::FallbackNeutral,
        }
    }
}

impl RecordFlag {
    pub fn name(self) -> &'static str {
        match self {
            RecordFlag::AnchorMissingYes => "anchor_missing_yes",
            RecordFlag::AnchorMissingNo => "anchor_missing_no",
            RecordFlag::FallbackNeutral => "fallback_neutral",
            RecordFlag::AnchorTokensAbsent => "anchor_tokens_absent",
            RecordFlag::Skipped => "skipped",
            RecordFlag::NoNumberFound => "no_number_found",
            RecordFlag::NoLabelTokenPresent => "no_label_token_present",
            RecordFlag::RequestFailed => "request_failed",
            RecordFlag::RetrievalMiss => "retrieval_miss",
        }
    }
}

/// One evaluated example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub task_id: String,
    pub prediction: String,
    pub gold: Gold,
    pub correct: bool,
    #[serde(serialize_with = "fixed::f64")]
    pub confidence: f64,
    pub method: Method,
    #[serde(default)]
    pub flags: BTreeSet<RecordFlag>,
}

impl EvalRecord {
    /// Minimal record for metric computations and tests.
    pub fn scored(id: impl Into<String>, confidence: f64, correct: bool) -> Self {
        Self {
            id: id.into(),
            task_id: String::new(),
            prediction: String::new(),
            gold: Gold::One(String::new()),
            correct,
            confidence,
            method: Method::ClassificationNormalized,
            flags: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub count: usize,
    #[serde(serialize_with = "fixed::f64")]
    pub mean_confidence: f64,
    #[serde(serialize_with = "fixed::f64")]
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub task_id: String,
    pub n: usize,
    #[serde(serialize_with = "fixed::f64")]
    pub accuracy: f64,
    /// `None` when only one correctness class is present.
    #[serde(serialize_with = "fixed::opt_f64")]
    pub auroc: Option<f64>,
    #[serde(serialize_with = "fixed::f64")]
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
}

fn by_confidence_then_id(a: &EvalRecord, b: &EvalRecord) -> Ordering {
    a.confidence
        .total_cmp(&b.confidence)
        .then_with(|| a.id.cmp(&b.id))
}

/// Bin sizes for `n` records: the first `n % bins` bins get one extra.
pub fn equal_mass_counts(n: usize, n_bins: usize) -> Vec<usize> {
    let (q, r) = (n / n_bins, n % n_bins);
    (0..n_bins).map(|b| q + usize::from(b < r)).collect()
}

/// Records sorted by `(confidence, id)`, each paired with the mean
/// correctness of every record sharing its exact confidence.
///
/// Tied records are indistinguishable to a confidence-based binning, so
/// their correctness is shared across the tie group rather than assigned by
/// id order. Without ties this is plain 0/1 correctness.
fn sorted_with_tie_accuracy(records: &[EvalRecord]) -> Vec<(&EvalRecord, f64)> {
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| by_confidence_then_id(a, b));

    let mut out = Vec::with_capacity(sorted.len());
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].confidence == sorted[i].confidence {
            j += 1;
        }
        let hits = sorted[i..j].iter().filter(|r| r.correct).count();
        let acc = hits as f64 / (j - i) as f64;
        out.extend(sorted[i..j].iter().map(|r| (*r, acc)));
        i = j;
    }
    out
}

fn partition_with_accuracy(
    records: &[EvalRecord],
    n_bins: usize,
) -> Result<Vec<Vec<(&EvalRecord, f64)>>> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if n_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    let sorted = sorted_with_tie_accuracy(records);
    let mut rest = sorted.as_slice();
    Ok(equal_mass_counts(records.len(), n_bins)
        .into_iter()
        .map(|c| {
            let (head, tail) = rest.split_at(c);
            rest = tail;
            head.to_vec()
        })
        .collect())
}

/// Records split into equal-mass bins, lowest confidence first.
pub fn equal_mass_partition(
    records: &[EvalRecord],
    n_bins: usize,
) -> Result<Vec<Vec<&EvalRecord>>> {
    Ok(partition_with_accuracy(records, n_bins)?
        .into_iter()
        .map(|bin| bin.into_iter().map(|(r, _)| r).collect())
        .collect())
}

fn summarize(members: &[(&EvalRecord, f64)]) -> CalibrationBin {
    if members.is_empty() {
        return CalibrationBin {
            count: 0,
            mean_confidence: 0.0,
            mean_accuracy: 0.0,
        };
    }
    let n = members.len() as f64;
    let conf: f64 = members.iter().map(|(r, _)| r.confidence).sum();
    let acc: f64 = members.iter().map(|(_, a)| a).sum();
    CalibrationBin {
        count: members.len(),
        mean_confidence: conf / n,
        mean_accuracy: acc / n,
    }
}

pub fn equal_mass_bins(records: &[EvalRecord], n_bins: usize) -> Result<Vec<CalibrationBin>> {
    Ok(partition_with_accuracy(records, n_bins)?
        .iter()
        .map(|m| summarize(m))
        .collect())
}

/// Expected calibration error over equal-mass bins.
pub fn ece(records: &[EvalRecord], n_bins: usize) -> Result<f64> {
    let n = records.len() as f64;
    Ok(partition_with_accuracy(records, n_bins)?
        .iter()
        .map(|m| {
            let gap: f64 = m.iter().map(|(r, acc)| acc - r.confidence).sum();
            gap.abs() / n
        })
        .sum())
}

/// Published-style bin row: size plus mean accuracy and mean confidence,
/// both as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub count: f64,
    pub mean_accuracy: f64,
    pub mean_confidence: f64,
}

impl BinSummary {
    pub fn new(count: f64, mean_accuracy: f64, mean_confidence: f64) -> Self {
        Self {
            count,
            mean_accuracy,
            mean_confidence,
        }
    }
}

impl From<&CalibrationBin> for BinSummary {
    fn from(b: &CalibrationBin) -> Self {
        Self::new(b.count as f64, b.mean_accuracy, b.mean_confidence)
    }
}

fn validate_summaries(bins: &[BinSummary]) -> Result<f64> {
    for b in bins {
        if !(b.count >= 0.0 && b.count.is_finite()) {
            return Err(MetricsError::InvalidValue {
                field: "count",
                value: b.count,
            });
        }
        if !(0.0..=1.0).contains(&b.mean_accuracy) {
            return Err(MetricsError::InvalidValue {
                field: "mean_accuracy",
                value: b.mean_accuracy,
            });
        }
        if !(0.0..=1.0).contains(&b.mean_confidence) {
            return Err(MetricsError::InvalidValue {
                field: "mean_confidence",
                value: b.mean_confidence,
            });
        }
    }
    let total: f64 = bins.iter().map(|b| b.count).sum();
    if total <= 0.0 {
        return Err(MetricsError::AllEmptyBins);
    }
    Ok(total)
}

/// ECE from aggregated bin rows.
pub fn ece_from_bins(bins: &[BinSummary]) -> Result<f64> {
    let total = validate_summaries(bins)?;
    Ok(bins
        .iter()
        .map(|b| b.count / total * (b.mean_accuracy - b.mean_confidence).abs())
        .sum())
}

/// Count-weighted mean accuracy of aggregated bin rows.
pub fn accuracy_from_bins(bins: &[BinSummary]) -> Result<f64> {
    let total = validate_summaries(bins)?;
    Ok(bins.iter().map(|b| b.count / total * b.mean_accuracy).sum())
}

/// Probability that a random correct record outranks a random incorrect one,
/// ties counting one half (Mann-Whitney U with midranks).
pub fn auroc(records: &[EvalRecord]) -> Result<f64> {
    let scored: Vec<(f64, bool)> = records.iter().map(|r| (r.confidence, r.correct)).collect();
    auroc_scores(&scored)
}

pub fn auroc_scores(scored: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scored.iter().filter(|(_, c)| *c).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::DegenerateClasses);
    }

    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of 1-based midranks of the correct records.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = sorted[i..j].iter().filter(|(_, c)| *c).count();
        rank_sum += midrank * pos_in_group as f64;
        i = j;
    }

    let (p, q) = (n_pos as f64, n_neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * q))
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

/// Accuracy, AUROC, ECE and the bin table for one task.
pub fn calibration_report(
    task_id: &str,
    records: &[EvalRecord],
    n_bins: usize,
) -> Result<CalibrationReport> {
    let bins = equal_mass_bins(records, n_bins)?;
    let auroc = match auroc(records) {
        Ok(v) => Some(v),
        Err(MetricsError::DegenerateClasses) => None,
        Err(e) => return Err(e),
    };
    Ok(CalibrationReport {
        task_id: task_id.to_string(),
        n: records.len(),
        accuracy: accuracy(records)?,
        auroc,
        ece: ece(records, n_bins)?,
        bins,
    })
}

/// Accuracy gain (percentage points) per percent of queries retrieved.
pub fn retrieval_efficiency(accuracy_gain_pp: f64, retrieval_rate_pct: f64) -> Result<f64> {
    if retrieval_rate_pct == 0.0 {
        return Err(MetricsError::ZeroRetrieval);
    }
    if !(retrieval_rate_pct > 0.0 && retrieval_rate_pct.is_finite()) {
        return Err(MetricsError::InvalidValue {
            field: "retrieval_rate_pct",
            value: retrieval_rate_pct,
        });
    }
    Ok(accuracy_gain_pp / retrieval_rate_pct)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(items: &[(f64, bool)]) -> Vec<EvalRecord> {
        items
            .iter()
            .enumerate()
            .map(|(i, &(c, ok))| EvalRecord::scored(format!("r{i:04}"), c, ok))
            .collect()
    }

    #[test]
    fn auroc_examples() {
        let r = recs(&[(0.9, true), (0.8, true), (0.2, false), (0.1, false)]);
        assert_eq!(auroc(&r).unwrap(), 1.0);

        let r = recs(&[
            (0.5, true),
            (0.5, false),
            (0.5, true),
            (0.5, false),
            (0.5, false),
        ]);
        assert_eq!(auroc(&r).unwrap(), 0.5);

        let r = recs(&[(0.9, true), (0.4, true), (0.6, false)]);
        assert_eq!(auroc(&r).unwrap(), 0.5);
    }

    #[test]
    fn auroc_degenerate() {
        let r = recs(&[(0.9, true), (0.3, true)]);
        assert_eq!(auroc(&r), Err(MetricsError::DegenerateClasses));
        let report = calibration_report("t", &r, 2).unwrap();
        assert_eq!(report.auroc, None);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains(r#""auroc":null"#), "{json}");
    }

    #[test]
    fn bin_counts() {
        let r = recs(&vec![(0.5, true); 20]);
        let bins = equal_mass_bins(&r, 10).unwrap();
        assert!(bins.iter().all(|b| b.count == 2));

        let r = recs(&vec![(0.5, true); 23]);
        let counts: Vec<_> = equal_mass_bins(&r, 10)
            .unwrap()
            .iter()
            .map(|b| b.count)
            .collect();
        assert_eq!(counts, [3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);

        let r = recs(&[(0.37, false)]);
        let bins = equal_mass_bins(&r, 1).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].mean_confidence, 0.37);
        assert_eq!(bins[0].mean_accuracy, 0.0);
    }

    #[test]
    fn bins_break_ties_by_id() {
        let mut r = vec![
            EvalRecord::scored("b", 0.5, true),
            EvalRecord::scored("a", 0.5, false),
            EvalRecord::scored("c", 0.1, true),
        ];
        let parts = equal_mass_partition(&r, 3).unwrap();
        let ids: Vec<_> = parts.iter().map(|p| p[0].id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        r.reverse();
        let parts = equal_mass_partition(&r, 3).unwrap();
        let ids: Vec<_> = parts.iter().map(|p| p[0].id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn bins_errors() {
        assert_eq!(equal_mass_bins(&[], 10), Err(MetricsError::EmptyInput));
        let r = recs(&[(0.2, true)]);
        assert_eq!(equal_mass_bins(&r, 0), Err(MetricsError::ZeroBins));
        assert_eq!(ece(&[], 10), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn fewer_records_than_bins() {
        let r = recs(&[(0.2, true), (0.9, false)]);
        let bins = equal_mass_bins(&r, 4).unwrap();
        let counts: Vec<_> = bins.iter().map(|b| b.count).collect();
        assert_eq!(counts, [1, 1, 0, 0]);
        assert!((ece(&r, 4).unwrap() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn ece_examples() {
        // 10 bins of 10, each holding 7 correct records at confidence 0.7
        let mut items = Vec::new();
        for _ in 0..10 {
            items.extend(std::iter::repeat_n((0.7, true), 7));
            items.extend(std::iter::repeat_n((0.7, false), 3));
        }
        let mut r = recs(&items);
        for (i, rec) in r.iter_mut().enumerate() {
            rec.id = format!("{i:04}");
        }
        assert!(ece(&r, 10).unwrap().abs() < 1e-12);

        let mut items = vec![(0.9, true); 60];
        items.extend(vec![(0.9, false); 40]);
        let r = recs(&items);
        assert!((ece(&r, 10).unwrap() - 0.3).abs() < 1e-12);
        assert!(equal_mass_bins(&r, 10)
            .unwrap()
            .iter()
            .all(|b| (b.mean_accuracy - 0.6).abs() < 1e-12));
    }

    #[test]
    fn tie_groups_share_accuracy() {
        // Two tied records straddle the bin boundary; both bins see the
        // tie group's accuracy of one half.
        let r = vec![
            EvalRecord::scored("a", 0.1, false),
            EvalRecord::scored("b", 0.6, true),
            EvalRecord::scored("c", 0.6, false),
            EvalRecord::scored("d", 0.9, true),
        ];
        let bins = equal_mass_bins(&r, 2).unwrap();
        assert_eq!(bins[0].mean_accuracy, 0.25);
        assert_eq!(bins[1].mean_accuracy, 0.75);
        let ids: Vec<Vec<&str>> = equal_mass_partition(&r, 2)
            .unwrap()
            .iter()
            .map(|b| b.iter().map(|r| r.id.as_str()).collect())
            .collect();
        assert_eq!(ids, [vec!["a", "b"], vec!["c", "d"]]);
    }

    #[test]
    fn ece_from_bins_examples() {
        let one = [BinSummary::new(5.0, 0.4, 0.4)];
        assert_eq!(ece_from_bins(&one).unwrap(), 0.0);
        assert_eq!(
            accuracy_from_bins(&[BinSummary::new(3.0, 1.0, 0.2)]).unwrap(),
            1.0
        );
        assert_eq!(
            ece_from_bins(&[BinSummary::new(0.0, 0.5, 0.5)]),
            Err(MetricsError::AllEmptyBins)
        );
        assert!(matches!(
            ece_from_bins(&[BinSummary::new(1.0, 75.0, 0.5)]),
            Err(MetricsError::InvalidValue {
                field: "mean_accuracy",
                ..
            })
        ));
    }

    #[test]
    fn efficiency() {
        assert!((retrieval_efficiency(9.09, 25.0).unwrap() - 0.3636).abs() < 1e-12);
        assert_eq!(retrieval_efficiency(0.0, 50.0).unwrap(), 0.0);
        assert_eq!(
            retrieval_efficiency(1.0, 0.0),
            Err(MetricsError::ZeroRetrieval)
        );
        assert!(retrieval_efficiency(1.0, -3.0).is_err());
    }

    #[test]
    fn record_json_shape() {
        let mut r = EvalRecord::scored("x1", 0.25, true);
        r.task_id = "gsm8k".into();
        r.gold = Gold::Many(vec!["a".into(), "b".into()]);
        r.flags.insert(RecordFlag::AnchorMissingNo);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(
            json,
            r#"{"id":"x1","task_id":"gsm8k","prediction":"","gold":["a","b"],"correct":true,"confidence":0.250000,"method":"classification_normalized","flags":["anchor_missing_no"]}"#
        );
        let back: EvalRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}

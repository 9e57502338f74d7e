use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use super::{BenchError, DatasetExample, MatchError, Result, TaskKind, TaskSpec};
use crate::client::{ClientError, GenerationParams, ModelClient};
use crate::confidence::{ConfidenceError, ConfidenceScore, Method};
use crate::fixed;
use crate::metrics::{self, CalibrationBin, EvalRecord, RecordFlag};

/// Confidence assigned to examples whose requests failed.
const FAILED_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    #[default]
    Normalized,
    Raw,
    Both,
}

impl std::str::FromStr for ConfidenceMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normalized" | "norm" => Ok(Self::Normalized),
            "raw" => Ok(Self::Raw),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown confidence mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    /// Sorted by id. Raw-scored under [`ConfidenceMode::Raw`], normalized
    /// otherwise.
    pub records: Vec<EvalRecord>,
    /// Same ids and predictions scored by raw probability; only in
    /// [`ConfidenceMode::Both`].
    pub raw_records: Option<Vec<EvalRecord>>,
    /// `(id, message)` for every example whose requests failed.
    pub failures: Vec<(String, String)>,
    /// Failures caused by the endpoint itself (unreachable, rate limited, HTTP).
    pub endpoint_failures: usize,
}

struct Scored {
    record: EvalRecord,
    raw: f64,
    failure: Option<ClientError>,
}

fn error_flag(e: &ClientError) -> Option<RecordFlag> {
    match e {
        ClientError::NoLabelTokenPresent => Some(RecordFlag::NoLabelTokenPresent),
        ClientError::Confidence(ConfidenceError::AnchorTokensAbsent) => {
            Some(RecordFlag::AnchorTokensAbsent)
        }
        _ => None,
    }
}

fn score_example(
    task: &TaskSpec,
    matcher: &super::AnswerMatcher,
    example: &DatasetExample,
    client: &ModelClient,
) -> Scored {
    let prompt = task.render_prompt(example);
    let context = task.context_field.as_ref().and(example.context.as_deref());
    let method = match task.kind {
        TaskKind::Classification => Method::ClassificationNormalized,
        TaskKind::Generation => Method::SelfEval,
    };
    let outcome: std::result::Result<(String, Option<ConfidenceScore>), (String, ClientError)> =
        match task.kind {
            TaskKind::Classification => client
                .classify(&prompt, task.labels())
                .map(|c| (c.label, Some(c.confidence)))
                .map_err(|e| (String::new(), e)),
            TaskKind::Generation => client
                .generate_answer(&prompt, context, GenerationParams::default())
                .map_err(|e| (String::new(), e))
                .and_then(
                    |g| match client.self_evaluate(&prompt, &g.answer, context) {
                        Ok(c) => Ok((g.answer, c)),
                        Err(e) => Err((g.answer, e)),
                    },
                ),
        };

    let mut record = EvalRecord {
        id: example.id.clone(),
        task_id: task.task_id.clone(),
        prediction: String::new(),
        gold: example.gold.clone(),
        correct: false,
        confidence: FAILED_CONFIDENCE,
        method,
        flags: BTreeSet::new(),
    };
    match outcome {
        Ok((prediction, score)) => {
            record.correct = match matcher.matches(&prediction, &example.gold) {
                Ok(c) => c,
                Err(MatchError::NoNumberFound) => {
                    record.flags.insert(RecordFlag::NoNumberFound);
                    false
                }
            };
            record.prediction = prediction;
            let raw = match score {
                Some(score) => {
                    record.confidence = score.value;
                    record
                        .flags
                        .extend(score.flags.iter().copied().map(RecordFlag::from));
                    score.raw.unwrap_or(score.value)
                }
                None => {
                    record.flags.insert(RecordFlag::Skipped);
                    FAILED_CONFIDENCE
                }
            };
            Scored {
                record,
                raw,
                failure: None,
            }
        }
        Err((prediction, e)) => {
            record.prediction = prediction;
            record.flags.insert(RecordFlag::RequestFailed);
            record.flags.insert(RecordFlag::FallbackNeutral);
            record.flags.extend(error_flag(&e));
            Scored {
                record,
                raw: FAILED_CONFIDENCE,
                failure: Some(e),
            }
        }
    }
}

fn as_raw_record(record: &EvalRecord, raw: f64) -> EvalRecord {
    EvalRecord {
        confidence: raw.clamp(0.0, 1.0),
        method: Method::Raw,
        ..record.clone()
    }
}

/// Scores every example. Per-example failures are recorded as incorrect,
/// flagged records; they never abort the run.
pub fn run_eval(
    task: &TaskSpec,
    examples: &[DatasetExample],
    client: &ModelClient,
    mode: ConfidenceMode,
) -> Result<EvalOutput> {
    task.validate()?;
    let matcher = task.answer_matcher()?;
    let mut scored = client.map_bounded(examples, |ex| score_example(task, &matcher, ex, client));
    scored.sort_by(|a, b| a.record.id.cmp(&b.record.id));

    let mut failures = Vec::new();
    let mut endpoint_failures = 0;
    for s in &scored {
        if let Some(e) = &s.failure {
            endpoint_failures += usize::from(e.is_endpoint_error());
            failures.push((s.record.id.clone(), e.to_string()));
        }
    }
    let (records, raw_records): (Vec<EvalRecord>, Option<Vec<EvalRecord>>) = match mode {
        ConfidenceMode::Normalized => (scored.into_iter().map(|s| s.record).collect(), None),
        ConfidenceMode::Raw => (
            scored
                .iter()
                .map(|s| as_raw_record(&s.record, s.raw))
                .collect(),
            None,
        ),
        ConfidenceMode::Both => {
            let raw = scored
                .iter()
                .map(|s| as_raw_record(&s.record, s.raw))
                .collect();
            (scored.into_iter().map(|s| s.record).collect(), Some(raw))
        }
    };
    verify_records(task, &records)?;
    Ok(EvalOutput {
        records,
        raw_records,
        failures,
        endpoint_failures,
    })
}

/// Checks every record's `correct` against the task matcher. Failed
/// requests must be marked incorrect.
pub fn verify_records(task: &TaskSpec, records: &[EvalRecord]) -> Result<()> {
    let matcher = task.answer_matcher()?;
    for r in records {
        let expected = if r.flags.contains(&RecordFlag::RequestFailed) {
            false
        } else {
            matcher.matches(&r.prediction, &r.gold).unwrap_or(false)
        };
        if r.correct != expected {
            return Err(BenchError::Verification { id: r.id.clone() });
        }
    }
    Ok(())
}

/// Calibration report plus flag counts. Records flagged `skipped` are
/// counted but excluded from the metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task_id: String,
    pub n: usize,
    #[serde(serialize_with = "fixed::f64")]
    pub accuracy: f64,
    #[serde(serialize_with = "fixed::opt_f64")]
    pub auroc: Option<f64>,
    #[serde(
        skip_serializing_if = "Option::is_none",
        serialize_with = "fixed::opt_opt_f64"
    )]
    pub raw_auroc: Option<Option<f64>>,
    #[serde(serialize_with = "fixed::f64")]
    pub ece: f64,
    #[serde(
        skip_serializing_if = "Option::is_none",
        serialize_with = "fixed::opt_opt_f64"
    )]
    pub raw_ece: Option<Option<f64>>,
    pub bins: Vec<CalibrationBin>,
    pub flag_counts: BTreeMap<String, usize>,
}

fn scorable(records: &[EvalRecord]) -> Vec<EvalRecord> {
    records
        .iter()
        .filter(|r| !r.flags.contains(&RecordFlag::Skipped))
        .cloned()
        .collect()
}

pub fn build_report(
    task_id: &str,
    records: &[EvalRecord],
    raw_records: Option<&[EvalRecord]>,
    n_bins: usize,
) -> Result<EvalReport> {
    let kept = scorable(records);
    let base = metrics::calibration_report(task_id, &kept, n_bins)?;
    let (raw_auroc, raw_ece) = match raw_records {
        Some(raw) => {
            let raw = scorable(raw);
            let auroc = match metrics::auroc(&raw) {
                Ok(v) => Some(v),
                Err(metrics::MetricsError::DegenerateClasses) => None,
                Err(e) => return Err(e.into()),
            };
            (Some(auroc), Some(Some(metrics::ece(&raw, n_bins)?)))
        }
        None => (None, None),
    };
    let mut flag_counts = BTreeMap::new();
    for flag in records.iter().flat_map(|r| r.flags.iter()) {
        *flag_counts.entry(flag.name().to_string()).or_insert(0) += 1;
    }
    Ok(EvalReport {
        task_id: base.task_id,
        n: base.n,
        accuracy: base.accuracy,
        auroc: base.auroc,
        raw_auroc,
        ece: base.ece,
        raw_ece,
        bins: base.bins,
        flag_counts,
    })
}

/// One JSON object per line.
pub fn records_jsonl(records: &[EvalRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Reliability curve: one row per bin.
pub fn calibration_csv(bins: &[CalibrationBin]) -> String {
    let mut out = String::from("bin,count,mean_confidence,mean_accuracy\n");
    for (i, b) in bins.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{}",
            b.count,
            fixed::format(b.mean_confidence),
            fixed::format(b.mean_accuracy)
        );
    }
    out
}

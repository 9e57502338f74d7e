//! Confidence-gated retrieval.
//!
//! Each question is first answered without context and self-evaluated. When
//! that confidence is below `tau` the retriever is consulted, the question is
//! answered again with the retrieved documents, and the second answer replaces
//! the first only if its confidence is strictly higher.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bench::{AnswerMatcher, DatasetExample};
use crate::client::{ClientError, GenerationParams, ModelClient};
use crate::fixed;
use crate::metrics::{self, MetricsError, RecordFlag};

#[derive(Debug, thiserror::Error)]
pub enum RagError {
    #[error("no context for example {0}")]
    RetrievalMiss(String),
    #[error("retriever: {0}")]
    Retriever(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, RagError>;

pub trait Retriever: Send + Sync {
    fn retrieve(&self, id: &str, query: &str) -> Result<Vec<String>>;
}

/// Serves contexts shipped with the dataset, looked up by example id.
#[derive(Debug, Clone, Default)]
pub struct StaticRetriever {
    contexts: HashMap<String, Vec<String>>,
}

impl StaticRetriever {
    pub fn new(contexts: HashMap<String, Vec<String>>) -> Self {
        Self { contexts }
    }

    pub fn from_examples(examples: &[DatasetExample]) -> Self {
        Self::new(
            examples
                .iter()
                .filter_map(|e| Some((e.id.clone(), e.context.clone()?)))
                .collect(),
        )
    }
}

impl Retriever for StaticRetriever {
    fn retrieve(&self, id: &str, _query: &str) -> Result<Vec<String>> {
        self.contexts
            .get(id)
            .cloned()
            .ok_or_else(|| RagError::RetrievalMiss(id.to_string()))
    }
}

/// POSTs `{"query", "top_k"}` and reads `{"passages": [{"text"}]}`.
pub struct HttpRetriever {
    http: reqwest::blocking::Client,
    url: String,
    top_k: usize,
}

#[derive(Deserialize)]
struct Passages {
    passages: Vec<Passage>,
}

#[derive(Deserialize)]
struct Passage {
    text: String,
}

impl HttpRetriever {
    pub fn new(url: impl Into<String>, top_k: usize) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| RagError::Retriever(e.to_string()))?;
        Ok(Self {
            http,
            url: url.into(),
            top_k,
        })
    }
}

impl Retriever for HttpRetriever {
    fn retrieve(&self, _id: &str, query: &str) -> Result<Vec<String>> {
        let response = self
            .http
            .post(&self.url)
            .json(&json!({"query": query, "top_k": self.top_k}))
            .send()
            .map_err(|e| RagError::Retriever(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(RagError::Retriever(format!("HTTP {}", status.as_u16())));
        }
        let body: Passages = response
            .json()
            .map_err(|e| RagError::Retriever(format!("malformed reply: {e}")))?;
        Ok(body
            .passages
            .into_iter()
            .take(self.top_k)
            .map(|p| p.text)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pass {
    pub answer: String,
    pub confidence: f64,
    pub flags: BTreeSet<RecordFlag>,
}

/// Answer plus self-evaluation. An unscorable self-evaluation (skip
/// policy) counts as confidence 0 and is flagged.
fn answer_pass(client: &ModelClient, question: &str, context: Option<&[String]>) -> Result<Pass> {
    let generation = client.generate_answer(question, context, GenerationParams::default())?;
    let score = client.self_evaluate(question, &generation.answer, context)?;
    let mut flags = BTreeSet::new();
    let confidence = match score {
        Some(s) => {
            flags.extend(s.flags.iter().copied().map(RecordFlag::from));
            s.value
        }
        None => {
            flags.insert(RecordFlag::Skipped);
            0.0
        }
    };
    Ok(Pass {
        answer: generation.answer,
        confidence,
        flags,
    })
}

pub fn first_pass(example: &DatasetExample, client: &ModelClient) -> Result<Pass> {
    answer_pass(client, &example.input, None)
}

/// Retrieval plus the second answer. `Ok(None)` on a retrieval miss.
pub fn second_pass(
    example: &DatasetExample,
    client: &ModelClient,
    retriever: &dyn Retriever,
) -> Result<Option<Pass>> {
    let docs = match retriever.retrieve(&example.id, &example.input) {
        Ok(d) => d,
        Err(RagError::RetrievalMiss(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    answer_pass(client, &example.input, Some(&docs)).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptiveOutcome {
    pub id: String,
    pub first_answer: String,
    #[serde(serialize_with = "fixed::f64")]
    pub first_conf: f64,
    pub retrieved: bool,
    pub second_answer: Option<String>,
    #[serde(serialize_with = "fixed::opt_f64")]
    pub second_conf: Option<f64>,
    pub final_answer: String,
    #[serde(serialize_with = "fixed::f64")]
    pub final_conf: f64,
    pub flags: BTreeSet<RecordFlag>,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_nan() || tau < 0.0 {
        return Err(RagError::InvalidConfig(format!(
            "tau must be >= 0, got {tau}"
        )));
    }
    Ok(())
}

/// Combines the passes. `second` is consulted only when `first.confidence <
/// tau`; it yields `None` on a retrieval miss.
pub fn decide(
    id: &str,
    first: &Pass,
    tau: f64,
    second: impl FnOnce() -> Result<Option<Pass>>,
) -> Result<AdaptiveOutcome> {
    let mut outcome = AdaptiveOutcome {
        id: id.to_string(),
        first_answer: first.answer.clone(),
        first_conf: first.confidence,
        retrieved: false,
        second_answer: None,
        second_conf: None,
        final_answer: first.answer.clone(),
        final_conf: first.confidence,
        flags: first.flags.clone(),
    };
    let retrieve = first.confidence < tau;
    if !retrieve {
        return Ok(outcome);
    }
    outcome.retrieved = true;
    match second()? {
        None => {
            outcome.flags.insert(RecordFlag::RetrievalMiss);
        }
        Some(pass) => {
            if pass.confidence > first.confidence {
                outcome.final_answer = pass.answer.clone();
                outcome.final_conf = pass.confidence;
            }
            outcome.second_answer = Some(pass.answer);
            outcome.second_conf = Some(pass.confidence);
        }
    }
    Ok(outcome)
}

pub fn answer_adaptive(
    example: &DatasetExample,
    tau: f64,
    client: &ModelClient,
    retriever: &dyn Retriever,
) -> Result<AdaptiveOutcome> {
    check_tau(tau)?;
    let first = first_pass(example, client)?;
    decide(&example.id, &first, tau, || {
        second_pass(example, client, retriever)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub retrieval_rate_pct: f64,
    pub accuracy_pct: f64,
    pub gain_pp: f64,
    /// `None` when nothing was retrieved.
    pub efficiency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Accuracy (%) of the first-pass answers alone.
    pub baseline_accuracy_pct: f64,
    /// Examples answered without context; always the example count.
    pub first_passes: usize,
    /// Examples answered again with context, across all thresholds.
    pub second_passes: usize,
    /// Outcomes per threshold, in `rows` order.
    pub outcomes: Vec<Vec<AdaptiveOutcome>>,
}

fn pct(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

/// One row per threshold. First passes run once per example; second
/// passes run at most once per example and are shared by every threshold
/// that needs them.
pub fn sweep(
    examples: &[DatasetExample],
    taus: &[f64],
    client: &ModelClient,
    retriever: &dyn Retriever,
    matcher: &AnswerMatcher,
) -> Result<SweepResult> {
    if taus.is_empty() {
        return Err(RagError::InvalidConfig("empty threshold list".into()));
    }
    for &t in taus {
        check_tau(t)?;
    }
    let firsts = client
        .map_bounded(examples, |ex| first_pass(ex, client))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let max_tau = taus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let needed: Vec<usize> = (0..examples.len())
        .filter(|&i| firsts[i].confidence < max_tau)
        .collect();
    let computed = client
        .map_bounded(&needed, |&i| second_pass(&examples[i], client, retriever))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut seconds: Vec<Option<Option<Pass>>> = vec![None; examples.len()];
    for (i, pass) in needed.iter().zip(computed) {
        seconds[*i] = Some(pass);
    }

    let correct =
        |answer: &str, ex: &DatasetExample| matcher.matches(answer, &ex.gold).unwrap_or(false);
    let n = examples.len();
    let baseline = pct(
        examples
            .iter()
            .zip(&firsts)
            .filter(|(ex, f)| correct(&f.answer, ex))
            .count(),
        n,
    );

    let mut rows = Vec::with_capacity(taus.len());
    let mut all_outcomes = Vec::with_capacity(taus.len());
    for &tau in taus {
        let outcomes = examples
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                decide(&ex.id, &firsts[i], tau, || {
                    Ok(seconds[i]
                        .clone()
                        .expect("second pass computed for every tau below max"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let retrieved = outcomes.iter().filter(|o| o.retrieved).count();
        let right = outcomes
            .iter()
            .zip(examples)
            .filter(|(o, ex)| correct(&o.final_answer, ex))
            .count();
        let rate = pct(retrieved, n);
        let accuracy = pct(right, n);
        let gain = accuracy - baseline;
        rows.push(SweepRow {
            tau,
            retrieval_rate_pct: rate,
            accuracy_pct: accuracy,
            gain_pp: gain,
            efficiency: metrics::retrieval_efficiency(gain, rate).ok(),
        });
        all_outcomes.push(outcomes);
    }
    Ok(SweepResult {
        rows,
        baseline_accuracy_pct: baseline,
        first_passes: firsts.len(),
        second_passes: needed.len(),
        outcomes: all_outcomes,
    })
}

pub const UNDEFINED: &str = "undefined";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("tau,retrieval_pct,accuracy_pct,gain_pp,efficiency\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fixed::format(r.tau),
            fixed::format(r.retrieval_rate_pct),
            fixed::format(r.accuracy_pct),
            fixed::format(r.gain_pp),
            r.efficiency
                .map_or_else(|| UNDEFINED.to_string(), fixed::format)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::Matcher;
    use crate::client::mock::{text_response, yes_no_response, ScriptEntry, ScriptedBackend};
    use crate::client::ClientConfig;
    use crate::metrics::Gold;
    use std::sync::Arc;

    fn ex(id: &str, gold: &str) -> DatasetExample {
        DatasetExample {
            id: id.into(),
            input: format!("[{id}] question"),
            choices: None,
            gold: Gold::One(gold.into()),
            context: Some(vec![format!("doc for {id}")]),
        }
    }

    /// `[id]` without context answers `a1` at `c1`; with context answers
    /// `a2` at `c2`.
    fn scenario(items: &[(&str, &str, f64, &str, f64)]) -> ModelClient {
        let mut entries = Vec::new();
        for (id, a1, c1, a2, c2) in items {
            let tag = format!("[{id}]");
            entries.push(ScriptEntry::containing(
                [
                    tag.clone(),
                    "Context:".into(),
                    "Is this answer correct".into(),
                ],
                &yes_no_response(*c2, 1.0 - c2),
            ));
            entries.push(ScriptEntry::containing(
                [tag.clone(), "Is this answer correct".into()],
                &yes_no_response(*c1, 1.0 - c1),
            ));
            entries.push(ScriptEntry::containing(
                [tag.clone(), "Context:".into()],
                &text_response(a2),
            ));
            entries.push(ScriptEntry::containing([tag], &text_response(a1)));
        }
        ModelClient::new(
            Arc::new(ScriptedBackend::new(entries).unwrap()),
            ClientConfig::default(),
        )
    }

    #[test]
    fn algorithm_branches() {
        let client = scenario(&[
            ("hi", "x", 0.95, "y", 0.99),
            ("up", "x", 0.3, "y", 0.8),
            ("dn", "x", 0.3, "y", 0.2),
        ]);
        let r = StaticRetriever::from_examples(&[ex("hi", "x"), ex("up", "y"), ex("dn", "x")]);
        let o = answer_adaptive(&ex("hi", "x"), 0.7, &client, &r).unwrap();
        assert!(!o.retrieved);
        assert_eq!(o.final_answer, "x");
        assert_eq!(o.second_answer, None);
        let o = answer_adaptive(&ex("up", "y"), 0.7, &client, &r).unwrap();
        assert!(o.retrieved);
        assert_eq!(o.final_answer, "y");
        assert!((o.final_conf - 0.8).abs() < 1e-12);
        let o = answer_adaptive(&ex("dn", "x"), 0.7, &client, &r).unwrap();
        assert!(o.retrieved);
        assert_eq!(o.final_answer, "x");
        assert_eq!(o.second_answer.as_deref(), Some("y"));
    }

    #[test]
    fn tau_equal_to_confidence_does_not_retrieve() {
        let client = scenario(&[("q", "x", 0.5, "y", 0.9)]);
        let r = StaticRetriever::from_examples(&[ex("q", "x")]);
        assert!(
            !answer_adaptive(&ex("q", "x"), 0.5, &client, &r)
                .unwrap()
                .retrieved
        );
        assert!(
            answer_adaptive(&ex("q", "x"), 0.5000001, &client, &r)
                .unwrap()
                .retrieved
        );
    }

    #[test]
    fn retrieval_miss_keeps_first_answer() {
        let client = scenario(&[("q", "x", 0.2, "y", 0.9)]);
        let o = answer_adaptive(&ex("q", "x"), 0.7, &client, &StaticRetriever::default()).unwrap();
        assert!(o.retrieved);
        assert_eq!(o.final_answer, "x");
        assert!(o.flags.contains(&RecordFlag::RetrievalMiss));
    }

    #[test]
    fn sweep_scenario() {
        let client = scenario(&[
            ("a", "right", 0.9, "right", 0.9),
            ("b", "right", 0.8, "right", 0.8),
            ("c", "wrong", 0.4, "right", 0.9),
            ("d", "wrong", 0.4, "right", 0.9),
        ]);
        let examples = vec![
            ex("a", "right"),
            ex("b", "right"),
            ex("c", "right"),
            ex("d", "right"),
        ];
        let r = StaticRetriever::from_examples(&examples);
        let m = AnswerMatcher::new(Matcher::Substring);
        let res = sweep(&examples, &[0.0, 0.5, 1.01], &client, &r, &m).unwrap();
        assert_eq!(res.baseline_accuracy_pct, 50.0);
        assert_eq!(res.rows[0].retrieval_rate_pct, 0.0);
        assert_eq!(res.rows[0].gain_pp, 0.0);
        assert_eq!(res.rows[0].efficiency, None);
        assert_eq!(res.rows[1].retrieval_rate_pct, 50.0);
        assert_eq!(res.rows[1].gain_pp, 50.0);
        assert_eq!(res.rows[1].efficiency, Some(1.0));
        assert_eq!(res.rows[2].retrieval_rate_pct, 100.0);
        assert_eq!(res.first_passes, 4);
        assert_eq!(res.second_passes, 4);
        let csv = sweep_csv(&res.rows);
        assert_eq!(
            csv.lines().nth(1).unwrap(),
            "0.000000,0.000000,50.000000,0.000000,undefined"
        );
        assert_eq!(
            csv.lines().nth(2).unwrap(),
            "0.500000,50.000000,100.000000,50.000000,1.000000"
        );
    }

    #[test]
    fn invalid_thresholds() {
        let client = scenario(&[]);
        let m = AnswerMatcher::new(Matcher::Substring);
        let r = StaticRetriever::default();
        assert!(matches!(
            sweep(&[], &[], &client, &r, &m),
            Err(RagError::InvalidConfig(_))
        ));
        assert!(matches!(
            sweep(&[], &[f64::NAN], &client, &r, &m),
            Err(RagError::InvalidConfig(_))
        ));
    }
}

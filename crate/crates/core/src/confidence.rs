//! Confidence arithmetic over truncated token log-probabilities.
//!
//! Two scores are produced here:
//!
//! - **normalized confidence** for a selected candidate out of a closed
//!   candidate set: `c(y) / Σ c(y')`, evaluated as
//!   `exp(logprob(y) - logsumexp(logprobs))` so that very long or very
//!   unlikely sequences never underflow;
//! - **self-evaluation confidence** from the first-position distribution of a
//!   Yes/No follow-up question: `c(Yes) / (c(Yes) + c(No))`, where every alias
//!   of an anchor contributes its probability and tokens missing from the
//!   top-K list count as zero.
//!
//! Everything in this module is a pure function of its inputs.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of alternatives requested per generated position.
pub const DEFAULT_TOP_K: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfidenceError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("invalid log-probability {0} (must be <= 0)")]
    InvalidLogProb(f64),
    #[error("candidate `{0}` is not in the candidate set")]
    UnknownCandidate(String),
    #[error("candidate `{0}` appears more than once")]
    DuplicateCandidate(String),
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("every candidate has zero probability")]
    ZeroMass,
    #[error("token `{0}` appears more than once in a distribution")]
    DuplicateToken(String),
    #[error("alias sets must be non-empty")]
    EmptyAliases,
    #[error("alias `{0}` is in both the yes and no sets")]
    AliasOverlap(String),
    #[error("neither yes nor no anchor tokens are present in the top-k distribution")]
    AnchorTokensAbsent,
}

pub type Result<T, E = ConfidenceError> = std::result::Result<T, E>;

fn check_logprob(lp: f64) -> Result<f64> {
    if lp.is_nan() || lp > 0.0 {
        return Err(ConfidenceError::InvalidLogProb(lp));
    }
    Ok(lp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

impl TokenLogprob {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
        }
    }
}

/// Truncated top-K alternatives at one generated position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct TokenDistribution {
    position: usize,
    entries: Vec<TokenLogprob>,
}

#[derive(Serialize, Deserialize)]
struct RawDistribution {
    position: usize,
    entries: Vec<TokenLogprob>,
}

impl TryFrom<RawDistribution> for TokenDistribution {
    type Error = ConfidenceError;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        Self::new(raw.position, raw.entries)
    }
}

impl From<TokenDistribution> for RawDistribution {
    fn from(d: TokenDistribution) -> Self {
        RawDistribution {
            position: d.position,
            entries: d.entries,
        }
    }
}

impl TokenDistribution {
    /// Validates that tokens are unique and every log-probability is finite
    /// and `<= 0`.
    pub fn new(position: usize, entries: Vec<TokenLogprob>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !check_logprob(e.logprob)?.is_finite() {
                return Err(ConfidenceError::InvalidLogProb(e.logprob));
            }
            if !seen.insert(e.token.as_str()) {
                return Err(ConfidenceError::DuplicateToken(e.token.clone()));
            }
        }
        Ok(Self { position, entries })
    }

    /// Convenience constructor from `(token, logprob)` pairs.
    pub fn from_pairs<S: Into<String>>(
        position: usize,
        pairs: impl IntoIterator<Item = (S, f64)>,
    ) -> Result<Self> {
        Self::new(
            position,
            pairs
                .into_iter()
                .map(|(t, lp)| TokenLogprob::new(t, lp))
                .collect(),
        )
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn entries(&self) -> &[TokenLogprob] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn logprob(&self, token: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.token == token)
            .map(|e| e.logprob)
    }

    /// Keeps the `k` most likely entries. Ties keep their original order.
    pub fn truncate(mut self, k: usize) -> Self {
        if self.entries.len() > k {
            self.entries.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
            self.entries.truncate(k);
        }
        self
    }

    /// Log of the summed probability of every listed alias present in the
    /// distribution, or `None` when no alias is listed at all.
    pub fn alias_log_mass<'a>(&self, aliases: impl IntoIterator<Item = &'a String>) -> Option<f64> {
        let lps: Vec<f64> = aliases
            .into_iter()
            .filter_map(|a| self.logprob(a))
            .collect();
        if lps.is_empty() {
            None
        } else {
            Some(log_sum_exp(&lps))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate_id: String,
    /// `log c(y|x)`.
    pub sequence_logprob: f64,
}

impl CandidateScore {
    pub fn new(candidate_id: impl Into<String>, sequence_logprob: f64) -> Self {
        Self {
            candidate_id: candidate_id.into(),
            sequence_logprob,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClassificationNormalized,
    SelfEval,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceFlag {
    AnchorMissingYes,
    AnchorMissingNo,
    FallbackNeutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub value: f64,
    pub method: Method,
    #[serde(default)]
    pub flags: BTreeSet<ConfidenceFlag>,
    /// Unnormalized probability of the selected candidate (`c(y|x)`, or
    /// `c(Yes)` for self-evaluation). Kept so raw and normalized scores can
    /// be compared on the same requests.
    #[serde(default)]
    pub raw: Option<f64>,
}

impl ConfidenceScore {
    pub fn has_flag(&self, flag: ConfidenceFlag) -> bool {
        self.flags.contains(&flag)
    }

    /// The same observation scored by its raw probability instead.
    pub fn as_raw(&self) -> Option<ConfidenceScore> {
        self.raw.map(|r| ConfidenceScore {
            value: r.clamp(0.0, 1.0),
            method: Method::Raw,
            flags: self.flags.clone(),
            raw: Some(r),
        })
    }
}

/// Numerically stable `ln Σ exp(x_i)`. Returns `-inf` for an empty slice or
/// when every term is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `log c(y|x)`: the log of the product of per-token probabilities.
pub fn sequence_logprob(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(ConfidenceError::EmptySequence);
    }
    token_logprobs
        .iter()
        .try_fold(0.0, |acc, &lp| Ok(acc + check_logprob(lp)?))
}

fn validate_candidates(candidates: &[CandidateScore]) -> Result<()> {
    if candidates.is_empty() {
        return Err(ConfidenceError::EmptyCandidates);
    }
    let mut seen = HashSet::with_capacity(candidates.len());
    for c in candidates {
        check_logprob(c.sequence_logprob)?;
        if !seen.insert(c.candidate_id.as_str()) {
            return Err(ConfidenceError::DuplicateCandidate(c.candidate_id.clone()));
        }
    }
    Ok(())
}

/// Normalized confidence of every candidate, in input order.
pub fn normalize_candidates(candidates: &[CandidateScore]) -> Result<Vec<f64>> {
    validate_candidates(candidates)?;
    let lps: Vec<f64> = candidates.iter().map(|c| c.sequence_logprob).collect();
    let total = log_sum_exp(&lps);
    if total == f64::NEG_INFINITY {
        return Err(ConfidenceError::ZeroMass);
    }
    Ok(lps.iter().map(|lp| (lp - total).exp()).collect())
}

/// Confidence of `selected` normalized over the closed candidate set.
pub fn normalized_confidence(
    candidates: &[CandidateScore],
    selected: &str,
) -> Result<ConfidenceScore> {
    let probs = normalize_candidates(candidates)?;
    let idx = candidates
        .iter()
        .position(|c| c.candidate_id == selected)
        .ok_or_else(|| ConfidenceError::UnknownCandidate(selected.to_string()))?;
    Ok(ConfidenceScore {
        value: probs[idx].clamp(0.0, 1.0),
        method: Method::ClassificationNormalized,
        flags: BTreeSet::new(),
        raw: Some(candidates[idx].sequence_logprob.exp()),
    })
}

/// Token spellings counted as "Yes" and as "No".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorAliases {
    yes: BTreeSet<String>,
    no: BTreeSet<String>,
}

impl Default for AnchorAliases {
    fn default() -> Self {
        let set = |xs: [&str; 4]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            yes: set(["Yes", " Yes", "yes", " yes"]),
            no: set(["No", " No", "no", " no"]),
        }
    }
}

impl AnchorAliases {
    pub fn new<S: Into<String>>(
        yes: impl IntoIterator<Item = S>,
        no: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let yes: BTreeSet<String> = yes.into_iter().map(Into::into).collect();
        let no: BTreeSet<String> = no.into_iter().map(Into::into).collect();
        if yes.is_empty() || no.is_empty() {
            return Err(ConfidenceError::EmptyAliases);
        }
        if let Some(t) = yes.intersection(&no).next() {
            return Err(ConfidenceError::AliasOverlap(t.clone()));
        }
        Ok(Self { yes, no })
    }

    pub fn yes(&self) -> &BTreeSet<String> {
        &self.yes
    }

    pub fn no(&self) -> &BTreeSet<String> {
        &self.no
    }
}

/// What to do when neither anchor appears in the top-K list.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    Error,
    #[default]
    Neutral,
    Skip,
}

impl std::str::FromStr for MissingPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "error" => Ok(Self::Error),
            "neutral" => Ok(Self::Neutral),
            "skip" => Ok(Self::Skip),
            other => Err(format!("unknown missing policy `{other}`")),
        }
    }
}

/// `c(Yes) / (c(Yes) + c(No))` from one distribution.
///
/// Returns `Ok(None)` only under [`MissingPolicy::Skip`] when both anchors are
/// absent.
pub fn self_eval_confidence(
    dist: &TokenDistribution,
    aliases: &AnchorAliases,
    policy: MissingPolicy,
) -> Result<Option<ConfidenceScore>> {
    let yes = dist.alias_log_mass(&aliases.yes);
    let no = dist.alias_log_mass(&aliases.no);

    let mut flags = BTreeSet::new();
    if yes.is_none() {
        flags.insert(ConfidenceFlag::AnchorMissingYes);
    }
    if no.is_none() {
        flags.insert(ConfidenceFlag::AnchorMissingNo);
    }
    let yes = yes.unwrap_or(f64::NEG_INFINITY);
    let no = no.unwrap_or(f64::NEG_INFINITY);
    let total = log_sum_exp(&[yes, no]);

    if total == f64::NEG_INFINITY {
        return match policy {
            MissingPolicy::Error => Err(ConfidenceError::AnchorTokensAbsent),
            MissingPolicy::Skip => Ok(None),
            MissingPolicy::Neutral => {
                // Reachable with present-but-zero anchors too; the flag
                // invariant requires both anchors to be missing outright.
                if flags.len() == 2 {
                    flags.insert(ConfidenceFlag::FallbackNeutral);
                }
                Ok(Some(ConfidenceScore {
                    value: 0.5,
                    method: Method::SelfEval,
                    flags,
                    raw: Some(0.0),
                }))
            }
        };
    }

    Ok(Some(ConfidenceScore {
        value: (yes - total).exp().clamp(0.0, 1.0),
        method: Method::SelfEval,
        flags,
        raw: Some(yes.exp()),
    }))
}

//! Deterministic scripted backend.
//!
//! A script is JSONL; each line carries exactly one selector plus the reply:
//!
//! ```text
//! {"digest": "<sha256 of the request>", "tokens": [...], "distributions": [[{"token","logprob"}, ...], ...]}
//! {"contains": ["[q07]", "Is this answer correct"], "tokens": [...], "distributions": [...]}
//! {"index": 0, "tokens": [...], "distributions": [...]}
//! ```
//!
//! A request is answered by the digest entry if one exists, otherwise by the
//! first `contains` entry (file order) whose substrings all occur in the
//! request transcript, otherwise by the next unused `index` entry in
//! ascending index order. Index entries are consumed in call order, so
//! scripts that use them should be driven with a concurrency of 1.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, ClientError, CompletionRequest, CompletionResponse, FinishReason, Result};
use crate::confidence::{TokenDistribution, TokenLogprob};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<Vec<String>>,
    pub tokens: Vec<String>,
    /// One list of alternatives per token. Leaving this empty scripts an
    /// endpoint that omitted log-probabilities.
    #[serde(default)]
    pub distributions: Vec<Vec<TokenLogprob>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<FinishReason>,
}

impl ScriptEntry {
    fn from_response(response: &CompletionResponse) -> Self {
        Self {
            digest: None,
            index: None,
            contains: None,
            tokens: response.generated_tokens.clone(),
            distributions: response
                .token_distributions
                .iter()
                .map(|d| d.entries().to_vec())
                .collect(),
            finish_reason: Some(response.finish_reason),
        }
    }

    pub fn for_digest(digest: impl Into<String>, response: &CompletionResponse) -> Self {
        Self {
            digest: Some(digest.into()),
            ..Self::from_response(response)
        }
    }

    pub fn containing<S: Into<String>>(
        needles: impl IntoIterator<Item = S>,
        response: &CompletionResponse,
    ) -> Self {
        Self {
            contains: Some(needles.into_iter().map(Into::into).collect()),
            ..Self::from_response(response)
        }
    }

    pub fn ordered(index: usize, response: &CompletionResponse) -> Self {
        Self {
            index: Some(index),
            ..Self::from_response(response)
        }
    }

    fn response(&self) -> std::result::Result<CompletionResponse, String> {
        let dists = self
            .distributions
            .iter()
            .enumerate()
            .map(|(pos, entries)| TokenDistribution::new(pos, entries.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        Ok(CompletionResponse {
            generated_tokens: self.tokens.clone(),
            token_distributions: dists,
            finish_reason: self.finish_reason.unwrap_or_default(),
        })
    }
}

/// Reply with `text` as a single token that is also the only alternative.
pub fn text_response(text: &str) -> CompletionResponse {
    CompletionResponse {
        generated_tokens: vec![text.to_string()],
        token_distributions: vec![
            TokenDistribution::from_pairs(0, [(text, 0.0)]).expect("valid distribution")
        ],
        finish_reason: FinishReason::Stop,
    }
}

/// Single-position reply whose alternatives are `pairs` (token, probability);
/// the first pair is the generated token.
pub fn prob_response(pairs: &[(&str, f64)]) -> CompletionResponse {
    let dist = TokenDistribution::from_pairs(0, pairs.iter().map(|(t, p)| (*t, p.ln())))
        .expect("valid distribution");
    CompletionResponse {
        generated_tokens: vec![pairs[0].0.to_string()],
        token_distributions: vec![dist],
        finish_reason: FinishReason::Length,
    }
}

/// Yes/No self-evaluation reply with the given probabilities.
pub fn yes_no_response(p_yes: f64, p_no: f64) -> CompletionResponse {
    let (first, second) = if p_yes >= p_no {
        (("Yes", p_yes), ("No", p_no))
    } else {
        (("No", p_no), ("Yes", p_yes))
    };
    prob_response(&[first, second])
}

pub struct ScriptedBackend {
    by_digest: HashMap<String, CompletionResponse>,
    by_contains: Vec<(Vec<String>, CompletionResponse)>,
    ordered: Mutex<VecDeque<CompletionResponse>>,
    has_ordered: bool,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self> {
        Self::numbered(entries.into_iter().enumerate().map(|(i, e)| (i + 1, e)))
    }

    fn numbered(entries: impl IntoIterator<Item = (usize, ScriptEntry)>) -> Result<Self> {
        let mut by_digest = HashMap::new();
        let mut by_contains = Vec::new();
        let mut ordered = Vec::new();
        for (line, entry) in entries {
            let invalid = |reason: String| ClientError::InvalidScript { line, reason };
            let response = entry.response().map_err(invalid)?;
            match (&entry.digest, entry.index, &entry.contains) {
                (Some(d), None, None) => {
                    if by_digest.insert(d.clone(), response).is_some() {
                        return Err(invalid(format!("duplicate digest {d}")));
                    }
                }
                (None, Some(idx), None) => ordered.push((idx, response)),
                (None, None, Some(needles)) if !needles.is_empty() => {
                    by_contains.push((needles.clone(), response))
                }
                _ => {
                    return Err(invalid(
                        "exactly one of digest, index or a non-empty contains list is required"
                            .into(),
                    ))
                }
            }
        }
        ordered.sort_by_key(|(idx, _)| *idx);
        let has_ordered = !ordered.is_empty();
        Ok(Self {
            by_digest,
            by_contains,
            ordered: Mutex::new(ordered.into_iter().map(|(_, r)| r).collect()),
            has_ordered,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(line).map_err(|e| ClientError::InvalidScript {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            entries.push((i + 1, entry));
        }
        Self::numbered(entries)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ClientError::InvalidScript {
            line: 0,
            reason: format!("{}: {e}", path.display()),
        })?;
        Self::from_jsonl(&text)
    }

    /// True when some replies are served in call order.
    pub fn requires_sequential(&self) -> bool {
        self.has_ordered
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

pub fn to_jsonl(entries: &[ScriptEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
        .collect()
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let digest = request.digest();
        if let Some(r) = self.by_digest.get(&digest) {
            return Ok(r.clone());
        }
        if !self.by_contains.is_empty() {
            let transcript = request.transcript();
            if let Some((_, r)) = self
                .by_contains
                .iter()
                .find(|(needles, _)| needles.iter().all(|n| transcript.contains(n.as_str())))
            {
                return Ok(r.clone());
            }
        }
        self.ordered
            .lock()
            .expect("script lock")
            .pop_front()
            .ok_or(ClientError::NoScriptMatch { digest })
    }
}

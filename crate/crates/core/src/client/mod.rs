//! Chat-completion access with per-token log-probabilities.
//!
//! A [`ModelClient`] wraps any [`Backend`] (the HTTP endpoint in [`http`], the
//! scripted mock in [`mock`], or a closure in tests) and adds response
//! caching plus the three request shapes the rest of the crate needs:
//! label classification, free-form answer generation, and Yes/No
//! self-evaluation of a previous answer.

mod cache;
pub mod http;
pub mod mock;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::confidence::{
    self, normalized_confidence, AnchorAliases, CandidateScore, ConfidenceError, ConfidenceScore,
    MissingPolicy, TokenDistribution, DEFAULT_TOP_K,
};

pub use cache::{CacheEntry, ResponseCache};

/// Follow-up question appended after the model's own answer.
pub const SELF_EVAL_PROMPT: &str = "Is this answer correct? Answer only Yes/No.";

pub const DEFAULT_CONCURRENCY: usize = 8;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no scripted response for request {digest}")]
    NoScriptMatch { digest: String },
    #[error("invalid mock script line {line}: {reason}")]
    InvalidScript { line: usize, reason: String },
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no label token is present in the top-k distribution")]
    NoLabelTokenPresent,
    #[error("label `{0}` has no single-token alias")]
    UnmappableLabel(String),
    #[error("alias `{alias}` is shared by labels `{first}` and `{second}`")]
    LabelAliasOverlap {
        alias: String,
        first: String,
        second: String,
    },
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error("cache: {0}")]
    Cache(String),
}

impl ClientError {
    /// Failures that come from reaching the endpoint rather than from the data.
    pub fn is_endpoint_error(&self) -> bool {
        matches!(
            self,
            ClientError::EndpointUnreachable(_)
                | ClientError::RateLimited { .. }
                | ClientError::Http { .. }
        )
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_name: String,
    pub messages: Vec<Message>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_logprobs: u32,
}

impl CompletionRequest {
    /// Stable hex SHA-256 over the model name, messages and sampling
    /// parameters. Field order is fixed by the struct definition.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// `role: content` lines, used for substring matching in mock scripts.
    pub fn transcript(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            let _ = writeln!(out, "{role}: {}", m.content);
        }
        out
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.messages.iter().any(|m| m.role == role)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    #[default]
    Stop,
    Length,
    #[serde(other)]
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub generated_tokens: Vec<String>,
    pub token_distributions: Vec<TokenDistribution>,
    #[serde(default)]
    pub finish_reason: FinishReason,
}

impl CompletionResponse {
    pub fn text(&self) -> String {
        self.generated_tokens.concat()
    }

    pub fn first_distribution(&self) -> Result<&TokenDistribution> {
        self.token_distributions
            .first()
            .ok_or_else(|| ClientError::MalformedResponse("no token distributions".into()))
    }

    fn validate(&self) -> Result<()> {
        if self.token_distributions.len() != self.generated_tokens.len() {
            return Err(ClientError::MalformedResponse(format!(
                "{} tokens but {} logprob distributions",
                self.generated_tokens.len(),
                self.token_distributions.len()
            )));
        }
        Ok(())
    }
}

/// Anything that can answer a chat-completion request.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse>;

    /// Per-token log-probabilities of `continuation` forced as the assistant
    /// reply. Only some endpoints can do this.
    fn score_continuation(
        &self,
        _request: &CompletionRequest,
        _continuation: &str,
    ) -> Result<Vec<f64>> {
        Err(ClientError::Unsupported("forced-continuation scoring"))
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        (**self).complete(request)
    }

    fn score_continuation(
        &self,
        request: &CompletionRequest,
        continuation: &str,
    ) -> Result<Vec<f64>> {
        (**self).score_continuation(request, continuation)
    }
}

/// Backend backed by a closure.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<CompletionResponse> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        (self.0)(request)
    }
}

/// Counts requests that reach the wrapped backend.
pub struct Counting<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B> Counting<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for Counting<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }

    fn score_continuation(
        &self,
        request: &CompletionRequest,
        continuation: &str,
    ) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score_continuation(request, continuation)
    }
}

/// How label confidence is read off the model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutMode {
    /// One request, `max_tokens = 1`; each label scores the summed
    /// probability of its aliases at the first generated position.
    #[default]
    FirstToken,
    /// Each label's full text is scored as a forced continuation. Requires
    /// [`Backend::score_continuation`].
    FullSequence,
}

/// A class label and the tokens that count as choosing it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub label: String,
    /// Spellings read at the answer position. Empty means `label` and
    /// `" " + label`.
    #[serde(default)]
    pub aliases: BTreeSet<String>,
    /// Display text rendered next to the label in the prompt.
    #[serde(default)]
    pub text: Option<String>,
}

impl LabelSpec {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            aliases: BTreeSet::new(),
            text: None,
        }
    }

    pub fn with_aliases<S: Into<String>>(mut self, aliases: impl IntoIterator<Item = S>) -> Self {
        self.aliases = aliases.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn effective_aliases(&self) -> BTreeSet<String> {
        if self.aliases.is_empty() {
            [self.label.clone(), format!(" {}", self.label)]
                .into_iter()
                .collect()
        } else {
            self.aliases.clone()
        }
    }
}

/// Without a tokenizer, "single token" is approximated as one
/// whitespace-free word with an optional leading space.
fn is_single_token_alias(alias: &str) -> bool {
    let core = alias.strip_prefix(' ').unwrap_or(alias);
    !core.is_empty() && !core.chars().any(char::is_whitespace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: String,
    pub confidence: ConfidenceScore,
    /// Normalized probability of every scored label, in label-set order.
    /// Labels absent from the top-k list are omitted.
    pub distribution: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub answer: String,
    pub response: CompletionResponse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub model_name: String,
    pub top_k: usize,
    pub concurrency: usize,
    pub readout: ReadoutMode,
    pub aliases: AnchorAliases,
    pub missing_policy: MissingPolicy,
    /// Optional system message prepended to every conversation.
    pub system_prompt: Option<String>,
    /// User turn when context is supplied; `{context}` and `{question}` are
    /// substituted.
    pub context_template: String,
    pub self_eval_prompt: String,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            model_name: "mock".to_string(),
            top_k: DEFAULT_TOP_K,
            concurrency: DEFAULT_CONCURRENCY,
            readout: ReadoutMode::FirstToken,
            aliases: AnchorAliases::default(),
            missing_policy: MissingPolicy::Neutral,
            system_prompt: None,
            context_template: "Context:\n{context}\n\nQuestion: {question}".to_string(),
            self_eval_prompt: SELF_EVAL_PROMPT.to_string(),
        }
    }
}

/// Substitutes `{name}` placeholders in one pass, so substituted text is
/// never re-expanded.
pub fn render_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub struct ModelClient {
    backend: Arc<dyn Backend>,
    cache: Option<Arc<ResponseCache>>,
    config: ClientConfig,
}

impl ModelClient {
    pub fn new(backend: Arc<dyn Backend>, config: ClientConfig) -> Self {
        Self {
            backend,
            cache: None,
            config,
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn concurrency(&self) -> usize {
        self.config.concurrency.max(1)
    }

    /// Applies `f` to every item with at most [`Self::concurrency`] in flight.
    /// Output order matches input order.
    pub fn map_bounded<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Send + Sync,
    {
        use rayon::prelude::*;
        if self.concurrency() == 1 || items.len() < 2 {
            return items.iter().map(f).collect();
        }
        match rayon::ThreadPoolBuilder::new()
            .num_threads(self.concurrency())
            .build()
        {
            Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            Err(_) => items.iter().map(f).collect(),
        }
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        let digest = request.digest();
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&digest)) {
            return Ok(hit);
        }
        let response = self.backend.complete(request)?;
        response.validate()?;
        let response = CompletionResponse {
            token_distributions: response
                .token_distributions
                .into_iter()
                .map(|d| d.truncate(self.config.top_k))
                .collect(),
            ..response
        };
        if let Some(cache) = &self.cache {
            cache.insert(&digest, &response)?;
        }
        Ok(response)
    }

    fn request(
        &self,
        messages: Vec<Message>,
        max_tokens: u32,
        temperature: f64,
    ) -> CompletionRequest {
        let mut all = Vec::with_capacity(messages.len() + 1);
        if let Some(sys) = &self.config.system_prompt {
            all.push(Message::system(sys.clone()));
        }
        all.extend(messages);
        CompletionRequest {
            model_name: self.config.model_name.clone(),
            messages: all,
            max_tokens,
            temperature,
            top_logprobs: self.config.top_k as u32,
        }
    }

    /// The user turn: the bare question, or the question behind its context.
    pub fn user_turn(&self, question: &str, context: Option<&[String]>) -> String {
        match context {
            Some(docs) if !docs.is_empty() => render_template(
                &self.config.context_template,
                &[("context", &docs.join("\n\n")), ("question", question)],
            ),
            _ => question.to_string(),
        }
    }

    /// Conversation for judging `answer`: question (with context), the
    /// answer as the assistant turn, then the self-evaluation prompt.
    pub fn self_eval_messages(
        &self,
        question: &str,
        answer: &str,
        context: Option<&[String]>,
    ) -> Vec<Message> {
        vec![
            Message::user(self.user_turn(question, context)),
            Message::assistant(answer),
            Message::user(self.config.self_eval_prompt.clone()),
        ]
    }

    pub fn classify(&self, prompt: &str, labels: &[LabelSpec]) -> Result<Classification> {
        if labels.is_empty() {
            return Err(ClientError::InvalidInput("empty label set".into()));
        }
        let candidates = match self.config.readout {
            ReadoutMode::FirstToken => self.first_token_scores(prompt, labels)?,
            ReadoutMode::FullSequence => self.full_sequence_scores(prompt, labels)?,
        };
        if candidates.is_empty() {
            return Err(ClientError::NoLabelTokenPresent);
        }
        // argmax; equal scores resolve to the alphabetically first label
        let best = candidates
            .iter()
            .min_by(|a, b| {
                b.sequence_logprob
                    .total_cmp(&a.sequence_logprob)
                    .then_with(|| a.candidate_id.cmp(&b.candidate_id))
            })
            .expect("non-empty");
        let confidence = normalized_confidence(&candidates, &best.candidate_id)?;
        let probs = confidence::normalize_candidates(&candidates)?;
        Ok(Classification {
            label: best.candidate_id.clone(),
            confidence,
            distribution: candidates
                .iter()
                .zip(probs)
                .map(|(c, p)| (c.candidate_id.clone(), p))
                .collect(),
        })
    }

    fn first_token_scores(
        &self,
        prompt: &str,
        labels: &[LabelSpec],
    ) -> Result<Vec<CandidateScore>> {
        let mut owner: std::collections::HashMap<String, &str> = Default::default();
        let mut alias_sets = Vec::with_capacity(labels.len());
        for spec in labels {
            let aliases = spec.effective_aliases();
            if !aliases.iter().any(|a| is_single_token_alias(a)) {
                return Err(ClientError::UnmappableLabel(spec.label.clone()));
            }
            for a in &aliases {
                if let Some(prev) = owner.insert(a.clone(), &spec.label) {
                    return Err(ClientError::LabelAliasOverlap {
                        alias: a.clone(),
                        first: prev.to_string(),
                        second: spec.label.clone(),
                    });
                }
            }
            alias_sets.push(aliases);
        }

        let request = self.request(vec![Message::user(prompt)], 1, 0.0);
        let response = self.complete(&request)?;
        let dist = response.first_distribution()?;
        Ok(labels
            .iter()
            .zip(&alias_sets)
            .filter_map(|(spec, aliases)| {
                dist.alias_log_mass(aliases)
                    .map(|lp| CandidateScore::new(spec.label.clone(), lp))
            })
            .collect())
    }

    fn full_sequence_scores(
        &self,
        prompt: &str,
        labels: &[LabelSpec],
    ) -> Result<Vec<CandidateScore>> {
        let request = self.request(vec![Message::user(prompt)], 1, 0.0);
        labels
            .iter()
            .map(|spec| {
                let lps = self.backend.score_continuation(&request, &spec.label)?;
                Ok(CandidateScore::new(
                    spec.label.clone(),
                    confidence::sequence_logprob(&lps)?,
                ))
            })
            .collect()
    }

    /// Free-form answer, deterministic at the default temperature of 0.
    pub fn generate_answer(
        &self,
        question: &str,
        context: Option<&[String]>,
        params: GenerationParams,
    ) -> Result<Generation> {
        if question.trim().is_empty() {
            return Err(ClientError::InvalidInput("empty question".into()));
        }
        let request = self.request(
            vec![Message::user(self.user_turn(question, context))],
            params.max_tokens,
            params.temperature,
        );
        let response = self.complete(&request)?;
        Ok(Generation {
            answer: response.text().trim().to_string(),
            response,
        })
    }

    /// Yes/No self-evaluation confidence of `answer`. `Ok(None)` only when
    /// both anchors are missing under the skip policy.
    pub fn self_evaluate(
        &self,
        question: &str,
        answer: &str,
        context: Option<&[String]>,
    ) -> Result<Option<ConfidenceScore>> {
        let request = self.request(self.self_eval_messages(question, answer, context), 1, 0.0);
        let response = self.complete(&request)?;
        Ok(confidence::self_eval_confidence(
            response.first_distribution()?,
            &self.config.aliases,
            self.config.missing_policy,
        )?)
    }
}

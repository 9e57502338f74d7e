//! OpenAI-style `/chat/completions` backend.
//!
//! Requests ask for `logprobs: true` and `top_logprobs: k`; responses must
//! carry `choices[0].logprobs.content[*].top_logprobs`, otherwise they are
//! rejected as malformed. HTTP 429 is retried with exponential backoff.

use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, ClientError, CompletionRequest, CompletionResponse, FinishReason, Result};
use crate::confidence::{TokenDistribution, TokenLogprob};

/// Largest positive log-probability accepted and clamped to zero; some
/// servers emit `1e-7`-style rounding noise for near-certain tokens.
const POSITIVE_LOGPROB_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(attempt)
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }

    pub fn endpoint(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

pub struct HttpBackend {
    http: reqwest::blocking::Client,
    config: HttpConfig,
    url: String,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ClientError::EndpointUnreachable(e.to_string()))?;
        let url = config.endpoint();
        Ok(Self { http, config, url })
    }

    fn body(request: &CompletionRequest) -> Value {
        json!({
            "model": request.model_name,
            "messages": request.messages,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "logprobs": true,
            "top_logprobs": request.top_logprobs,
        })
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        let body = Self::body(request);
        let retry = self.config.retry;
        let mut attempt = 0;
        loop {
            let mut builder = self.http.post(&self.url).json(&body);
            if let Some(key) = &self.config.api_key {
                builder = builder.bearer_auth(key);
            }
            let response = builder
                .send()
                .map_err(|e| ClientError::EndpointUnreachable(e.to_string()))?;
            let status = response.status();
            if status.as_u16() == 429 {
                if attempt < retry.max_retries {
                    thread::sleep(retry.backoff(attempt));
                    attempt += 1;
                    continue;
                }
                return Err(ClientError::RateLimited {
                    attempts: attempt + 1,
                });
            }
            let text = response
                .text()
                .map_err(|e| ClientError::EndpointUnreachable(e.to_string()))?;
            if !status.is_success() {
                return Err(ClientError::Http {
                    status: status.as_u16(),
                    body: text,
                });
            }
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| ClientError::MalformedResponse(format!("invalid JSON: {e}")))?;
            return parse_chat_response(&value);
        }
    }
}

fn malformed(what: impl Into<String>) -> ClientError {
    ClientError::MalformedResponse(what.into())
}

fn read_logprob(v: &Value, at: &str) -> Result<f64> {
    let lp = v
        .get("logprob")
        .and_then(Value::as_f64)
        .ok_or_else(|| malformed(format!("{at}: missing logprob")))?;
    if lp > 0.0 && lp <= POSITIVE_LOGPROB_SLACK {
        return Ok(0.0);
    }
    Ok(lp)
}

/// Converts a chat-completion JSON body into a [`CompletionResponse`].
pub fn parse_chat_response(value: &Value) -> Result<CompletionResponse> {
    let choice = value
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or_else(|| malformed("no choices"))?;
    let content = choice
        .get("logprobs")
        .and_then(|l| l.get("content"))
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing logprobs.content"))?;

    let mut tokens = Vec::with_capacity(content.len());
    let mut dists = Vec::with_capacity(content.len());
    for (pos, item) in content.iter().enumerate() {
        let token = item
            .get("token")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed(format!("position {pos}: missing token")))?;
        let top = item
            .get("top_logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(format!("position {pos}: missing top_logprobs")))?;

        let mut entries: Vec<TokenLogprob> = Vec::with_capacity(top.len());
        for alt in top {
            let t = alt
                .get("token")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed(format!("position {pos}: alternative without token")))?;
            let lp = read_logprob(alt, &format!("position {pos}"))?;
            // duplicate spellings keep the first (most likely) occurrence
            if !entries.iter().any(|e| e.token == t) {
                entries.push(TokenLogprob::new(t, lp));
            }
        }
        if entries.is_empty() {
            entries.push(TokenLogprob::new(
                token,
                read_logprob(item, &format!("position {pos}"))?,
            ));
        }
        let dist = TokenDistribution::new(pos, entries)
            .map_err(|e| malformed(format!("position {pos}: {e}")))?;
        tokens.push(token.to_string());
        dists.push(dist);
    }

    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Other,
    };
    Ok(CompletionResponse {
        generated_tokens: tokens,
        token_distributions: dists,
        finish_reason,
    })
}

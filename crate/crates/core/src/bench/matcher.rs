//! Answer matching.
//!
//! All matchers compare normalized text: lowercased, whitespace collapsed to
//! single spaces, surrounding punctuation stripped.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::metrics::Gold;

/// Numbers as written in free-form answers: optional sign, digits with
/// thousands separators, optional fraction.
pub const DEFAULT_NUMBER_PATTERN: &str = r"-?\d[\d,]*(?:\.\d+)?";

const NUMERIC_REL_TOL: f64 = 1e-9;

static DEFAULT_NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(DEFAULT_NUMBER_PATTERN).expect("valid pattern"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Exact,
    Numeric,
    Substring,
}

impl std::str::FromStr for Matcher {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exact" => Ok(Matcher::Exact),
            "numeric" => Ok(Matcher::Numeric),
            "substring" => Ok(Matcher::Substring),
            other => Err(format!("unknown matcher {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MatchError {
    #[error("no number found in prediction")]
    NoNumberFound,
}

pub fn normalize(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Last number in `text`, separators removed. A pattern with a capture
/// group contributes the group's text.
pub fn last_number(text: &str, pattern: &Regex) -> Option<f64> {
    pattern
        .captures_iter(text)
        .filter_map(|c| {
            let m = c.get(1).or_else(|| c.get(0))?;
            m.as_str().replace(',', "").parse::<f64>().ok()
        })
        .last()
}

fn numbers_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= NUMERIC_REL_TOL * a.abs().max(b.abs())
}

/// A matcher bound to its number pattern.
#[derive(Debug, Clone)]
pub struct AnswerMatcher {
    pub kind: Matcher,
    number: Regex,
}

impl AnswerMatcher {
    pub fn new(kind: Matcher) -> Self {
        Self {
            kind,
            number: DEFAULT_NUMBER.clone(),
        }
    }

    pub fn with_number_pattern(kind: Matcher, pattern: &str) -> Result<Self, regex::Error> {
        Ok(Self {
            kind,
            number: Regex::new(pattern)?,
        })
    }

    pub fn number_pattern(&self) -> &str {
        self.number.as_str()
    }

    pub fn matches(&self, prediction: &str, gold: &Gold) -> Result<bool, MatchError> {
        match self.kind {
            Matcher::Exact => {
                let p = normalize(prediction);
                Ok(gold.answers().iter().any(|g| normalize(g) == p))
            }
            Matcher::Substring => {
                let p = normalize(prediction);
                Ok(gold.answers().iter().any(|g| {
                    let g = normalize(g);
                    !g.is_empty() && p.contains(&g)
                }))
            }
            Matcher::Numeric => {
                let p = last_number(prediction, &self.number).ok_or(MatchError::NoNumberFound)?;
                Ok(gold
                    .answers()
                    .iter()
                    .filter_map(|g| {
                        last_number(g, &self.number).or_else(|| last_number(g, &DEFAULT_NUMBER))
                    })
                    .any(|g| numbers_equal(p, g)))
            }
        }
    }
}

/// [`AnswerMatcher::matches`] with the default number pattern.
pub fn match_answer(prediction: &str, gold: &Gold, matcher: Matcher) -> Result<bool, MatchError> {
    AnswerMatcher::new(matcher).matches(prediction, gold)
}

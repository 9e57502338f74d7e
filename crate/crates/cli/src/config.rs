//! Run configuration: a flat `key = value` file, overridden by
//! `ANCHORCONF_<KEY>` environment variables, overridden by flags.
//!
//! ```text
//! # comments and blank lines are ignored
//! mock_script = fixtures/script.jsonl
//! task = tasks/gsm8k.json
//! dataset = data/gsm8k.jsonl
//! mode = both
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

pub const ENV_PREFIX: &str = "ANCHORCONF_";

/// Every recognised key with the name used in diagnostics.
pub const KEYS: &[(&str, &str)] = &[
    ("base_url", "endpoint base URL"),
    ("api_key_env", "API key environment variable name"),
    ("model", "model name"),
    ("mock_script", "mock script path"),
    ("timeout_secs", "request timeout"),
    ("max_retries", "rate-limit retry count"),
    ("task", "task spec path"),
    ("dataset", "dataset path"),
    ("mode", "confidence mode"),
    ("bins", "bin count"),
    ("missing_policy", "anchor missing policy"),
    ("top_k", "top-k log-probabilities"),
    ("concurrency", "concurrency limit"),
    ("cache", "cache path"),
    ("out", "output directory"),
    ("seed", "seed"),
    ("taus", "threshold list"),
    ("retriever", "retriever kind"),
    ("retriever_url", "retriever URL"),
    ("retriever_top_k", "retriever top-k"),
    ("p_data", "data distribution"),
    ("init_logits", "initial logits"),
    ("trace_every", "trace interval"),
    ("ce_steps", "CE steps"),
    ("ce_lr", "CE learning rate"),
    ("ce_batch", "CE batch size"),
    ("adv_steps", "advantage steps"),
    ("adv_lr", "advantage learning rate"),
    ("adv_batch", "advantage batch size"),
    ("clip_eps", "clip epsilon"),
    ("epochs", "advantage epochs"),
    ("kl_coef", "KL coefficient"),
    ("reward_option", "reward option"),
    ("dpo_steps", "DPO steps"),
    ("dpo_lr", "DPO learning rate"),
    ("beta", "DPO beta"),
    ("preferred", "preferred option"),
    ("rejected", "rejected option"),
];

pub fn describe(key: &str) -> &str {
    KEYS.iter().find(|(k, _)| *k == key).map_or(key, |(_, d)| d)
}

fn check_key(key: &str) -> Result<(), String> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(format!("unknown key {key:?}"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse_file_text(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!("{origin}:{}: expected key = value", i + 1))
            })?;
            let k = k.trim();
            check_key(k).map_err(|e| CliError::config(format!("{origin}:{}: {e}", i + 1)))?;
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { values })
    }

    /// File, then environment, then `overrides`.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CliError> {
        let mut settings = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::config(format!("config file {}: {e}", path.display()))
                })?;
                Self::parse_file_text(&text, &path.display().to_string())?
            }
            None => Self::default(),
        };
        for (name, value) in env {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if check_key(&key).is_ok() {
                    settings.values.insert(key, value);
                }
            }
        }
        for (key, value) in overrides {
            check_key(&key).map_err(CliError::config)?;
            settings.values.insert(key, value);
        }
        Ok(settings)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .filter(|v| !v.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::config(format!("{} is required (key `{key}`)", describe(key))))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.require(key).map(PathBuf::from)
    }

    pub fn parse<T>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| {
                    CliError::config(format!("{} (key `{key}`): {v:?}: {e}", describe(key)))
                })
            })
            .transpose()
    }

    pub fn parse_or<T>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    pub fn list<T>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>().map_err(|e| {
                    CliError::config(format!("{} (key `{key}`): {s:?}: {e}", describe(key)))
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// An option index, or `None` for the literal `none`.
    pub fn option_index(
        &self,
        key: &str,
        default: Option<usize>,
    ) -> Result<Option<usize>, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) if v.eq_ignore_ascii_case("none") => Ok(None),
            Some(_) => self.parse(key),
        }
    }
}

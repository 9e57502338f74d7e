use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{ClientError, CompletionResponse, Result};

/// One line of the cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_digest: String,
    pub response: CompletionResponse,
    /// Unix seconds.
    pub created_at: u64,
}

/// Request-digest keyed response store, optionally persisted as append-only
/// JSONL. Lookups take a shared lock; appends are serialized through one
/// writer.
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, CompletionResponse>>,
    writer: Mutex<Option<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::default(),
            writer: Mutex::new(None),
        }
    }

    /// Loads `path` if it exists and appends new entries to it. The first
    /// entry for a digest wins.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| cache_err(&path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| cache_err(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry = serde_json::from_str(&line).map_err(|e| {
                    ClientError::Cache(format!("{}:{}: {e}", path.display(), i + 1))
                })?;
                entries
                    .entry(entry.request_digest)
                    .or_insert(entry.response);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| cache_err(&path, e))?;
        Ok(Self {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<CompletionResponse> {
        self.entries
            .read()
            .expect("cache lock")
            .get(digest)
            .cloned()
    }

    pub fn insert(&self, digest: &str, response: &CompletionResponse) -> Result<()> {
        let mut writer = self.writer.lock().expect("cache writer lock");
        {
            let mut entries = self.entries.write().expect("cache lock");
            if entries.contains_key(digest) {
                return Ok(());
            }
            entries.insert(digest.to_string(), response.clone());
        }
        if let Some(file) = writer.as_mut() {
            let entry = CacheEntry {
                request_digest: digest.to_string(),
                response: response.clone(),
                created_at: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            let mut line =
                serde_json::to_string(&entry).map_err(|e| ClientError::Cache(e.to_string()))?;
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| ClientError::Cache(e.to_string()))?;
        }
        Ok(())
    }
}

fn cache_err(path: &Path, e: std::io::Error) -> ClientError {
    ClientError::Cache(format!("{}: {e}", path.display()))
}

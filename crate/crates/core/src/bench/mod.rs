//! Tasks, datasets and evaluation runs.

mod eval;
pub mod matcher;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::client::{render_template, LabelSpec};
use crate::metrics::{Gold, MetricsError};

pub use eval::{
    build_report, calibration_csv, records_jsonl, run_eval, verify_records, ConfidenceMode,
    EvalOutput, EvalReport,
};
pub use matcher::{match_answer, AnswerMatcher, MatchError, Matcher};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("{path}: line {line}: {reason}{}", more_lines(.problems.len()))]
    SchemaViolation {
        path: String,
        line: usize,
        reason: String,
        /// Every malformed line, in file order.
        problems: Vec<(usize, String)>,
    },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("record {id}: stored correctness disagrees with the matcher")]
    Verification { id: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn more_lines(n: usize) -> String {
    if n > 1 {
        format!(" (and {} more malformed lines)", n - 1)
    } else {
        String::new()
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub label_set: Option<Vec<LabelSpec>>,
    pub matcher: Matcher,
    /// `{input}` and `{choices}` are substituted.
    #[serde(default = "default_prompt_template")]
    pub prompt_template: String,
    /// Dataset field holding reference documents. When set, generation
    /// prompts include them.
    #[serde(default)]
    pub context_field: Option<String>,
    /// Overrides [`matcher::DEFAULT_NUMBER_PATTERN`].
    #[serde(default)]
    pub number_pattern: Option<String>,
}

fn default_prompt_template() -> String {
    "{input}".to_string()
}

impl TaskSpec {
    pub fn classification(task_id: impl Into<String>, labels: Vec<LabelSpec>) -> Self {
        Self {
            task_id: task_id.into(),
            kind: TaskKind::Classification,
            label_set: Some(labels),
            matcher: Matcher::Exact,
            prompt_template: default_prompt_template(),
            context_field: None,
            number_pattern: None,
        }
    }

    pub fn generation(task_id: impl Into<String>, matcher: Matcher) -> Self {
        Self {
            task_id: task_id.into(),
            kind: TaskKind::Generation,
            label_set: None,
            matcher,
            prompt_template: default_prompt_template(),
            context_field: None,
            number_pattern: None,
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read(path)?;
        let task: TaskSpec = serde_json::from_str(&text)
            .map_err(|e| BenchError::InvalidTask(format!("{}: {e}", path.display())))?;
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_id.trim().is_empty() {
            return Err(BenchError::InvalidTask("empty task_id".into()));
        }
        match self.kind {
            TaskKind::Classification => {
                if self.label_set.as_ref().is_none_or(Vec::is_empty) {
                    return Err(BenchError::InvalidTask(
                        "classification task needs a non-empty label_set".into(),
                    ));
                }
            }
            TaskKind::Generation => {
                if self.matcher == Matcher::Exact {
                    return Err(BenchError::InvalidTask(
                        "generation task needs the numeric or substring matcher".into(),
                    ));
                }
            }
        }
        self.answer_matcher()?;
        Ok(())
    }

    pub fn labels(&self) -> &[LabelSpec] {
        self.label_set.as_deref().unwrap_or(&[])
    }

    pub fn answer_matcher(&self) -> Result<AnswerMatcher> {
        match &self.number_pattern {
            None => Ok(AnswerMatcher::new(self.matcher)),
            Some(p) => AnswerMatcher::with_number_pattern(self.matcher, p)
                .map_err(|e| BenchError::InvalidTask(format!("number_pattern: {e}"))),
        }
    }

    /// The prompt for `example`. Choices are listed one per line, prefixed
    /// by the label at the same position when there is one.
    pub fn render_prompt(&self, example: &DatasetExample) -> String {
        let choices = example
            .choices
            .as_deref()
            .unwrap_or(&[])
            .iter()
            .enumerate()
            .map(|(i, c)| match self.labels().get(i) {
                Some(l) => format!("{}. {c}", l.label),
                None => c.clone(),
            })
            .collect::<Vec<_>>()
            .join("\n");
        render_template(
            &self.prompt_template,
            &[("input", &example.input), ("choices", &choices)],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetExample {
    pub id: String,
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub gold: Gold,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<Vec<String>>,
}

/// Per-document token cap and document count applied to contexts at load.
/// Tokens are whitespace-separated words; documents are cut at the tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextBudget {
    pub tokens_per_document: usize,
    pub max_documents: usize,
}

impl Default for ContextBudget {
    fn default() -> Self {
        Self {
            tokens_per_document: 2000,
            max_documents: 5,
        }
    }
}

impl ContextBudget {
    pub fn apply(&self, docs: Vec<String>) -> Vec<String> {
        docs.into_iter()
            .take(self.max_documents)
            .map(|d| {
                let words: Vec<&str> = d.split_whitespace().collect();
                if words.len() > self.tokens_per_document {
                    words[..self.tokens_per_document].join(" ")
                } else {
                    d
                }
            })
            .collect()
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => BenchError::FileNotFound(path.to_path_buf()),
        _ => BenchError::Io(e),
    })
}

pub fn load_dataset(path: impl AsRef<Path>, task: &TaskSpec) -> Result<Vec<DatasetExample>> {
    load_dataset_with(path, task, ContextBudget::default())
}

pub fn load_dataset_with(
    path: impl AsRef<Path>,
    task: &TaskSpec,
    budget: ContextBudget,
) -> Result<Vec<DatasetExample>> {
    let path = path.as_ref();
    let text = read(path)?;
    parse_dataset(&text, task, budget).map_err(|problems| {
        let (line, reason) = problems[0].clone();
        BenchError::SchemaViolation {
            path: path.display().to_string(),
            line,
            reason,
            problems,
        }
    })
}

fn parse_dataset(
    text: &str,
    task: &TaskSpec,
    budget: ContextBudget,
) -> std::result::Result<Vec<DatasetExample>, Vec<(usize, String)>> {
    let context_key = task.context_field.as_deref().unwrap_or("context");
    let mut examples = Vec::new();
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_example(line, context_key, budget) {
            Ok(ex) => {
                if !seen.insert(ex.id.clone()) {
                    problems.push((line_no, format!("duplicate id {:?}", ex.id)));
                } else {
                    examples.push(ex);
                }
            }
            Err(reason) => problems.push((line_no, reason)),
        }
    }
    if problems.is_empty() {
        Ok(examples)
    } else {
        Err(problems)
    }
}

fn string_list(v: &Value, field: &str) -> std::result::Result<Vec<String>, String> {
    match v {
        Value::String(s) => Ok(vec![s.clone()]),
        Value::Array(items) => items
            .iter()
            .map(|x| {
                x.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| format!("{field} entries must be strings"))
            })
            .collect(),
        _ => Err(format!("{field} must be a string or a list of strings")),
    }
}

fn parse_example(
    line: &str,
    context_key: &str,
    budget: ContextBudget,
) -> std::result::Result<DatasetExample, String> {
    let obj: Map<String, Value> = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let text_field = |name: &str| -> std::result::Result<String, String> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Number(n)) if name == "id" => Ok(n.to_string()),
            Some(_) => Err(format!("{name} must be a string")),
            None => Err(format!("missing {name}")),
        }
    };
    let id = text_field("id")?;
    if id.is_empty() {
        return Err("empty id".into());
    }
    let input = text_field("input")?;
    let gold = match obj.get("gold") {
        None | Some(Value::Null) => return Err("missing gold".into()),
        Some(Value::String(s)) => Gold::One(s.clone()),
        Some(Value::Number(n)) => Gold::One(n.to_string()),
        Some(v) => Gold::Many(string_list(v, "gold")?),
    };
    if gold.is_empty() {
        return Err("empty gold".into());
    }
    let choices = match obj.get("choices") {
        None | Some(Value::Null) => None,
        Some(v) => Some(string_list(v, "choices")?),
    };
    let context = match obj.get(context_key) {
        None | Some(Value::Null) => None,
        Some(v) => Some(budget.apply(string_list(v, context_key)?)),
    };
    Ok(DatasetExample {
        id,
        input,
        choices,
        gold,
        context,
    })
}

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anchorconf::bench::{self, ConfidenceMode, DatasetExample, TaskSpec};
use anchorconf::client::http::{HttpBackend, HttpConfig};
use anchorconf::client::mock::ScriptedBackend;
use anchorconf::client::{Backend, ClientConfig, ModelClient, ResponseCache};
use anchorconf::confidence::MissingPolicy;
use anchorconf::fixed;
use anchorconf::metrics::{self, BinSummary, CalibrationBin, DEFAULT_BINS};
use anchorconf::rag::{self, HttpRetriever, Retriever, StaticRetriever};
use anchorconf::sandbox::{self, SandboxConfig, ToyTask};

use crate::config::Settings;
use crate::error::CliError;

const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

fn build_client(s: &Settings) -> Result<ModelClient, CliError> {
    let mut config = ClientConfig {
        top_k: s.parse_or("top_k", ClientConfig::default().top_k)?,
        concurrency: s.parse_or("concurrency", ClientConfig::default().concurrency)?,
        missing_policy: s.parse_or("missing_policy", MissingPolicy::default())?,
        ..ClientConfig::default()
    };
    if config.concurrency == 0 {
        return Err(CliError::config("concurrency limit must be at least 1"));
    }
    let backend: Arc<dyn Backend> = match (s.get("base_url"), s.path("mock_script")) {
        (Some(url), None) => {
            config.model_name = s.require("model")?.to_string();
            let key_var = s.get("api_key_env").unwrap_or(DEFAULT_API_KEY_ENV);
            let mut http = HttpConfig::new(url);
            http.api_key = std::env::var(key_var).ok().filter(|k| !k.is_empty());
            if let Some(t) = s.parse::<u64>("timeout_secs")? {
                http.timeout = Duration::from_secs(t);
            }
            if let Some(r) = s.parse::<u32>("max_retries")? {
                http.retry.max_retries = r;
            }
            Arc::new(HttpBackend::new(http)?)
        }
        (None, Some(path)) => {
            if let Some(m) = s.get("model") {
                config.model_name = m.to_string();
            }
            if !path.exists() {
                return Err(CliError::config(format!(
                    "mock script path {} does not exist",
                    path.display()
                )));
            }
            let script = ScriptedBackend::from_path(&path)?;
            if script.requires_sequential() {
                config.concurrency = 1;
            }
            Arc::new(script)
        }
        _ => {
            return Err(CliError::config(
                "endpoint: exactly one of base_url or mock_script must be set",
            ))
        }
    };
    let mut client = ModelClient::new(backend, config);
    if let Some(path) = s.path("cache") {
        client = client.with_cache(Arc::new(ResponseCache::open(path)?));
    }
    Ok(client)
}

fn load_task(s: &Settings) -> Result<TaskSpec, CliError> {
    let path = s.require_path("task")?;
    if !path.exists() {
        return Err(CliError::config(format!(
            "task spec path {} does not exist",
            path.display()
        )));
    }
    Ok(TaskSpec::from_path(path)?)
}

fn load_examples(s: &Settings, task: &TaskSpec) -> Result<Vec<DatasetExample>, CliError> {
    let path = s.require_path("dataset")?;
    Ok(bench::load_dataset(path, task)?)
}

fn out_dir(s: &Settings) -> Result<PathBuf, CliError> {
    let dir = s.path("out").unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::data(format!("output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn json(value: &impl serde::Serialize) -> Result<String, CliError> {
    fixed::to_json(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::data(e.to_string()))
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "null".to_string(), fixed::format)
}

pub fn eval(s: &Settings) -> Result<(), CliError> {
    let task = load_task(s)?;
    let examples = load_examples(s, &task)?;
    let mode: ConfidenceMode = s.parse_or("mode", ConfidenceMode::default())?;
    let bins: usize = s.parse_or("bins", DEFAULT_BINS)?;
    if bins == 0 {
        return Err(CliError::config("bin count must be at least 1"));
    }
    let client = build_client(s)?;
    let out = out_dir(s)?;

    let result = bench::run_eval(&task, &examples, &client, mode)?;
    if !examples.is_empty() && result.endpoint_failures == examples.len() {
        let (_, msg) = &result.failures[0];
        return Err(CliError::endpoint(format!(
            "every request failed; first: {msg}"
        )));
    }
    for (id, msg) in &result.failures {
        eprintln!("warning: example {id}: {msg}");
    }
    let report = bench::build_report(
        &task.task_id,
        &result.records,
        result.raw_records.as_deref(),
        bins,
    )?;

    write(
        &out.join("records.jsonl"),
        &bench::records_jsonl(&result.records),
    )?;
    if let Some(raw) = &result.raw_records {
        write(&out.join("records_raw.jsonl"), &bench::records_jsonl(raw))?;
    }
    write(&out.join("report.json"), &json(&report)?)?;
    write(
        &out.join("calibration.csv"),
        &bench::calibration_csv(&report.bins),
    )?;

    let mut line = format!(
        "{}: n={} accuracy={} auroc={} ece={}",
        report.task_id,
        report.n,
        fixed::format(report.accuracy),
        opt(report.auroc),
        fixed::format(report.ece)
    );
    if let (Some(a), Some(e)) = (report.raw_auroc, report.raw_ece) {
        line += &format!(" raw_auroc={} raw_ece={}", opt(a), opt(e));
    }
    println!("{line}");
    Ok(())
}

fn build_retriever(
    s: &Settings,
    examples: &[DatasetExample],
) -> Result<Box<dyn Retriever>, CliError> {
    match s.get("retriever").unwrap_or("static") {
        "static" => Ok(Box::new(StaticRetriever::from_examples(examples))),
        "http" => {
            let url = s.require("retriever_url")?;
            let top_k = s.parse_or("retriever_top_k", 5usize)?;
            Ok(Box::new(HttpRetriever::new(url, top_k)?))
        }
        other => Err(CliError::config(format!(
            "retriever kind (key `retriever`): {other:?}: expected static or http"
        ))),
    }
}

pub fn sweep(s: &Settings) -> Result<(), CliError> {
    let taus: Vec<f64> = s.list("taus")?.unwrap_or_default();
    if taus.is_empty() {
        return Err(CliError::config(
            "threshold list is required and must be non-empty (key `taus`)",
        ));
    }
    let task = load_task(s)?;
    let mut examples = load_examples(s, &task)?;
    for ex in &mut examples {
        ex.input = task.render_prompt(ex);
    }
    let retriever = build_retriever(s, &examples)?;
    let matcher = task.answer_matcher()?;
    let client = build_client(s)?;
    let out = out_dir(s)?;

    let result = rag::sweep(&examples, &taus, &client, retriever.as_ref(), &matcher)?;
    let csv = rag::sweep_csv(&result.rows);
    write(&out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn read_bins(path: &Path, percent: bool) -> Result<Vec<BinSummary>, CliError> {
    if !path.exists() {
        return Err(CliError::data(format!(
            "{}: file not found",
            path.display()
        )));
    }
    let schema =
        |line: u64, msg: String| CliError::data(format!("{}:{line}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| schema(1, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| schema(1, format!("missing column {name}")))
    };
    let (ci, ai, fi) = (
        column("count")?,
        column("mean_accuracy")?,
        column("mean_confidence")?,
    );
    let mut bins = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> Result<f64, CliError> {
            let v = row.get(i).unwrap_or("");
            v.parse::<f64>()
                .map_err(|_| schema(line, format!("{name}: {v:?} is not a number")))
        };
        let mut acc = field(ai, "mean_accuracy")?;
        if percent {
            acc /= 100.0;
        }
        bins.push(BinSummary::new(
            field(ci, "count")?,
            acc,
            field(fi, "mean_confidence")?,
        ));
    }
    Ok(bins)
}

pub fn ece_from_bins(path: &Path, percent: bool) -> Result<(), CliError> {
    let bins = read_bins(path, percent)?;
    let ece = metrics::ece_from_bins(&bins).map_err(|e| match e {
        metrics::MetricsError::InvalidValue {
            field: "mean_accuracy",
            value,
        } if !percent && value > 1.0 => {
            CliError::data(format!("{e} (pass --percent for accuracies in percent)"))
        }
        e => e.into(),
    })?;
    let accuracy = metrics::accuracy_from_bins(&bins)?;
    println!("ece: {}", fixed::format(ece));
    println!("accuracy: {}", fixed::format(accuracy));
    Ok(())
}

fn sandbox_config(s: &Settings) -> Result<SandboxConfig, CliError> {
    let mut c = SandboxConfig::default();
    c.seed = s.parse_or("seed", c.seed)?;
    c.init_logits = s.list("init_logits")?;
    c.trace_every = s.parse_or("trace_every", c.trace_every)?;
    c.ce.steps = s.parse_or("ce_steps", c.ce.steps)?;
    c.ce.lr = s.parse_or("ce_lr", c.ce.lr)?;
    c.ce.batch_size = s.parse_or("ce_batch", c.ce.batch_size)?;
    c.advantage.steps = s.parse_or("adv_steps", c.advantage.steps)?;
    c.advantage.lr = s.parse_or("adv_lr", c.advantage.lr)?;
    c.advantage.batch_size = s.parse_or("adv_batch", c.advantage.batch_size)?;
    c.advantage.clip_eps = s.parse_or("clip_eps", c.advantage.clip_eps)?;
    c.advantage.epochs = s.parse_or("epochs", c.advantage.epochs)?;
    c.advantage.kl_coef = s.parse_or("kl_coef", c.advantage.kl_coef)?;
    c.advantage.reward_option = s.option_index("reward_option", c.advantage.reward_option)?;
    c.dpo.steps = s.parse_or("dpo_steps", c.dpo.steps)?;
    c.dpo.lr = s.parse_or("dpo_lr", c.dpo.lr)?;
    c.dpo.beta = s.parse_or("beta", c.dpo.beta)?;
    let (w, l) = c.dpo.preference.unzip();
    c.dpo.preference = match (
        s.option_index("preferred", w)?,
        s.option_index("rejected", l)?,
    ) {
        (Some(w), Some(l)) => Some((w, l)),
        (None, None) => None,
        _ => {
            return Err(CliError::config(
                "preferred and rejected options must both be set or both be none",
            ))
        }
    };
    Ok(c)
}

pub fn sandbox(s: &Settings) -> Result<(), CliError> {
    let p_data: Vec<f64> = s.list("p_data")?.unwrap_or_else(|| vec![0.7, 0.3]);
    let task = ToyTask::new(p_data)?;
    let config = sandbox_config(s)?;
    let out = out_dir(s)?;
    let comparison = sandbox::run_paradigm_comparison(&task, &config)?;
    write(
        &out.join("trace.csv"),
        &sandbox::trace_csv(&comparison.traces),
    )?;
    write(&out.join("summary.json"), &json(&comparison.summary)?)?;
    for arm in &comparison.summary.arms {
        println!(
            "{}: kl={} max_prob={} ece_proxy={}",
            arm.method.name(),
            fixed::format(arm.final_kl),
            fixed::format(arm.final_max_prob),
            fixed::format(arm.final_ece_proxy)
        );
    }
    println!("ce_kl_lowest: {}", comparison.summary.ce_kl_lowest);
    Ok(())
}

pub fn report(path: &Path, csv_out: Option<&Path>) -> Result<(), CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let bins: Vec<CalibrationBin> = value
        .get("bins")
        .cloned()
        .ok_or_else(|| CliError::data(format!("{}: missing bins", path.display())))
        .and_then(|b| {
            serde_json::from_value(b)
                .map_err(|e| CliError::data(format!("{}: bins: {e}", path.display())))
        })?;
    let csv = bench::calibration_csv(&bins);
    match csv_out {
        Some(p) => write(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

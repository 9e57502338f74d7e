//! Single-context softmax policy over `K` options, trained three ways:
//! cross-entropy on samples from a data distribution, clipped
//! advantage-weighted updates against a reward, and a pairwise preference
//! loss against a frozen reference. Cross-entropy recovers the data
//! distribution; the other two sharpen onto the rewarded/preferred option.
//!
//! All hyperparameter defaults live in [`SandboxConfig::default`].

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fixed;

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` after every step.
pub const LOGIT_CLAMP: f64 = 50.0;

const MAX_BACKTRACKS: u32 = 40;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SandboxError {
    #[error("invalid sandbox configuration: {0}")]
    ConfigInvalid(String),
}

pub type Result<T> = std::result::Result<T, SandboxError>;

fn invalid(msg: impl Into<String>) -> SandboxError {
    SandboxError::ConfigInvalid(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    data: Vec<f64>,
}

impl ToyTask {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.len() < 2 {
            return Err(invalid(format!(
                "need at least 2 options, got {}",
                data.len()
            )));
        }
        if data.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("probabilities must be finite and non-negative"));
        }
        let total: f64 = data.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { data })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k]).or_else(|e| {
            // 1/k rounding can miss the tolerance for some k
            if k >= 2 {
                let mut v = vec![1.0 / k as f64; k];
                v[k - 1] = 1.0 - v[..k - 1].iter().sum::<f64>();
                Self::new(v)
            } else {
                Err(e)
            }
        })
    }

    pub fn num_options(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.data).expect("validated distribution")
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// `KL(p || q)`; terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    logits: Vec<f64>,
    reference_logits: Vec<f64>,
}

impl ToyPolicy {
    /// The reference is frozen to `logits`.
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(invalid("policy needs at least 2 options"));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(invalid("logits must be finite"));
        }
        let logits: Vec<f64> = logits
            .into_iter()
            .map(|z| z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
            .collect();
        Ok(Self {
            reference_logits: logits.clone(),
            logits,
        })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![0.0; k])
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn reference_logits(&self) -> &[f64] {
        &self.reference_logits
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn log_probs(&self) -> Vec<f64> {
        log_softmax(&self.logits)
    }

    pub fn reference_log_probs(&self) -> Vec<f64> {
        log_softmax(&self.reference_logits)
    }

    pub fn num_options(&self) -> usize {
        self.logits.len()
    }

    fn with_logits(&self, logits: Vec<f64>) -> Self {
        Self {
            logits,
            reference_logits: self.reference_logits.clone(),
        }
    }

    fn stepped(&self, direction: &[f64], scale: f64) -> Vec<f64> {
        self.logits
            .iter()
            .zip(direction)
            .map(|(z, d)| (z + scale * d).clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
            .collect()
    }

    /// Gradient ascent along `direction`.
    fn ascend(&mut self, direction: &[f64], lr: f64) {
        self.logits = self.stepped(direction, lr);
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_task(policy: &ToyPolicy, task: &ToyTask) -> Result<()> {
    if policy.num_options() != task.num_options() {
        return Err(invalid(format!(
            "policy has {} options, task has {}",
            policy.num_options(),
            task.num_options()
        )));
    }
    Ok(())
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    Ok(())
}

fn check_index(i: usize, k: usize, what: &str) -> Result<()> {
    if i >= k {
        return Err(invalid(format!("{what} {i} out of range for {k} options")));
    }
    Ok(())
}

/// Gradient of the mean negative log-likelihood of `batch_size` samples
/// from the data distribution: `pi - empirical frequency`.
pub fn sampled_ce_gradient(
    policy: &ToyPolicy,
    task: &ToyTask,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    check_task(policy, task)?;
    if batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut counts = vec![0usize; task.num_options()];
    let sampler = task.sampler();
    for _ in 0..batch_size {
        counts[sampler.sample(rng)] += 1;
    }
    Ok(policy
        .probs()
        .iter()
        .zip(&counts)
        .map(|(p, c)| p - *c as f64 / batch_size as f64)
        .collect())
}

pub fn ce_step(
    policy: &mut ToyPolicy,
    task: &ToyTask,
    batch_size: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    check_lr(lr)?;
    let grad = sampled_ce_gradient(policy, task, batch_size, rng)?;
    let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
    policy.ascend(&descent, lr);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Baseline {
    /// Mean reward of the sampled batch.
    GroupMean,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_eps: f64,
    /// Surrogate passes over each sampled batch.
    pub epochs: usize,
    /// Weight of `KL(pi || reference)` subtracted from the objective.
    pub kl_coef: f64,
    pub baseline: Baseline,
    /// Option earning reward 1; `None` rewards every option equally.
    pub reward_option: Option<usize>,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.5,
            batch_size: 64,
            clip_eps: 0.2,
            epochs: 4,
            kl_coef: 0.001,
            baseline: Baseline::GroupMean,
            reward_option: Some(0),
        }
    }
}

/// Gradient of `KL(pi || ref)` with respect to the logits.
fn reverse_kl_gradient(policy: &ToyPolicy) -> Vec<f64> {
    let p = policy.probs();
    let lp = policy.log_probs();
    let lr = policy.reference_log_probs();
    let kl: f64 = p
        .iter()
        .zip(lp.iter().zip(&lr))
        .map(|(pi, (a, b))| pi * (a - b))
        .sum();
    p.iter()
        .zip(lp.iter().zip(&lr))
        .map(|(pi, (a, b))| pi * (a - b - kl))
        .collect()
}

/// Samples a batch from the current policy, then runs `epochs` clipped
/// surrogate ascent steps against that snapshot. Every step is shortened
/// until each sampled option's probability ratio to the snapshot lies in
/// `[1 - clip_eps, 1 + clip_eps]`.
pub fn advantage_step(
    policy: &mut ToyPolicy,
    task: &ToyTask,
    config: &AdvantageConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    check_task(policy, task)?;
    check_lr(config.lr)?;
    let k = policy.num_options();
    if !(config.clip_eps > 0.0 && config.clip_eps < 1.0) {
        return Err(invalid(format!(
            "clip_eps must be in (0, 1), got {}",
            config.clip_eps
        )));
    }
    if config.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    if let Some(r) = config.reward_option {
        check_index(r, k, "reward option")?;
    }

    let old = policy.probs();
    let sampler = WeightedIndex::new(&old).expect("softmax is a distribution");
    let samples: Vec<usize> = (0..config.batch_size)
        .map(|_| sampler.sample(rng))
        .collect();
    let rewards: Vec<f64> = samples
        .iter()
        .map(|&y| match config.reward_option {
            Some(r) => f64::from(u8::from(y == r)),
            None => 1.0,
        })
        .collect();
    let baseline = match config.baseline {
        Baseline::GroupMean => rewards.iter().sum::<f64>() / rewards.len() as f64,
        Baseline::Fixed(b) => b,
    };
    let advantages: Vec<f64> = rewards.iter().map(|r| r - baseline).collect();
    let (lo, hi) = (1.0 - config.clip_eps, 1.0 + config.clip_eps);
    let n = samples.len() as f64;

    for _ in 0..config.epochs {
        let p = policy.probs();
        let mut grad = vec![0.0; k];
        for (&y, &a) in samples.iter().zip(&advantages) {
            let ratio = p[y] / old[y];
            // the clipped branch of min(ratio * A, clip(ratio) * A) is flat
            if (a > 0.0 && ratio > hi) || (a < 0.0 && ratio < lo) || a == 0.0 {
                continue;
            }
            let w = a * ratio / n;
            for (j, g) in grad.iter_mut().enumerate() {
                *g += w * (f64::from(u8::from(j == y)) - p[j]);
            }
        }
        if config.kl_coef != 0.0 {
            for (g, d) in grad.iter_mut().zip(reverse_kl_gradient(policy)) {
                *g -= config.kl_coef * d;
            }
        }
        if grad.iter().all(|g| *g == 0.0) {
            continue;
        }
        let mut scale = config.lr;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = policy.stepped(&grad, scale);
            let q = softmax(&candidate);
            if samples
                .iter()
                .all(|&y| (lo..=hi).contains(&(q[y] / old[y])))
            {
                accepted = Some(candidate);
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some(logits) => *policy = policy.with_logits(logits),
            None => break,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta: f64,
    /// `(preferred, rejected)`; `None` means no preference signal.
    pub preference: Option<(usize, usize)>,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1.0,
            beta: 0.05,
            preference: Some((0, 1)),
        }
    }
}

fn dpo_margin(policy: &ToyPolicy, preferred: usize, rejected: usize, beta: f64) -> f64 {
    let lp = policy.log_probs();
    let lr = policy.reference_log_probs();
    beta * ((lp[preferred] - lr[preferred]) - (lp[rejected] - lr[rejected]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln sigmoid(beta * (ln r(w) - ln r(l)))` with `r = pi / pi_ref`.
pub fn dpo_loss(policy: &ToyPolicy, preferred: usize, rejected: usize, beta: f64) -> f64 {
    let u = dpo_margin(policy, preferred, rejected, beta);
    // -ln sigmoid(u) = ln(1 + e^-u)
    if u > 0.0 {
        (-u).exp().ln_1p()
    } else {
        -u + u.exp().ln_1p()
    }
}

/// Descent direction of [`dpo_loss`] with respect to the logits.
pub fn dpo_direction(policy: &ToyPolicy, preferred: usize, rejected: usize, beta: f64) -> Vec<f64> {
    let u = dpo_margin(policy, preferred, rejected, beta);
    let w = beta * sigmoid(-u);
    let mut d = vec![0.0; policy.num_options()];
    d[preferred] += w;
    d[rejected] -= w;
    d
}

pub fn dpo_step(
    policy: &mut ToyPolicy,
    task: &ToyTask,
    preferred: usize,
    rejected: usize,
    beta: f64,
    lr: f64,
) -> Result<()> {
    check_task(policy, task)?;
    check_lr(lr)?;
    let k = policy.num_options();
    check_index(preferred, k, "preferred option")?;
    check_index(rejected, k, "rejected option")?;
    if preferred == rejected {
        return Err(invalid("preferred and rejected options must differ"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid(format!("beta must be > 0, got {beta}")));
    }
    let d = dpo_direction(policy, preferred, rejected, beta);
    policy.ascend(&d, lr);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for CeConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 0.1,
            batch_size: 64,
        }
    }
}

/// Sandbox choices, not values taken from any real training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxConfig {
    pub seed: u64,
    /// Initial logits shared by all three arms; `None` means uniform.
    pub init_logits: Option<Vec<f64>>,
    /// Trace every this many steps (plus step 0 and the last step).
    pub trace_every: usize,
    pub ce: CeConfig,
    pub advantage: AdvantageConfig,
    pub dpo: DpoConfig,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            seed: 20240917,
            init_logits: None,
            trace_every: 10,
            ce: CeConfig::default(),
            advantage: AdvantageConfig::default(),
            dpo: DpoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Ce,
    Advantage,
    Dpo,
}

impl TrainMethod {
    pub fn name(self) -> &'static str {
        match self {
            TrainMethod::Ce => "ce",
            TrainMethod::Advantage => "advantage",
            TrainMethod::Dpo => "dpo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracePoint {
    pub step: usize,
    pub method: TrainMethod,
    #[serde(serialize_with = "fixed::f64")]
    pub kl: f64,
    #[serde(serialize_with = "fixed::f64")]
    pub max_prob: f64,
    #[serde(serialize_with = "fixed::f64")]
    pub ece_proxy: f64,
}

pub fn trace_point(
    step: usize,
    method: TrainMethod,
    policy: &ToyPolicy,
    task: &ToyTask,
) -> TracePoint {
    let p = policy.probs();
    let top = argmax(&p);
    TracePoint {
        step,
        method,
        kl: kl_divergence(task.data(), &p),
        max_prob: p[top],
        ece_proxy: (p[top] - task.data()[top]).abs(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub method: TrainMethod,
    pub points: Vec<TracePoint>,
    pub policy: ToyPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub method: TrainMethod,
    pub steps: usize,
    #[serde(serialize_with = "fixed::f64")]
    pub final_kl: f64,
    #[serde(serialize_with = "fixed::f64")]
    pub final_max_prob: f64,
    #[serde(serialize_with = "fixed::f64")]
    pub final_ece_proxy: f64,
    #[serde(serialize_with = "fixed_vec")]
    pub final_probs: Vec<f64>,
}

fn fixed_vec<S: serde::Serializer>(xs: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(xs.len()))?;
    for x in xs {
        let raw = serde_json::value::RawValue::from_string(fixed::format(*x))
            .map_err(serde::ser::Error::custom)?;
        seq.serialize_element(&raw)?;
    }
    seq.end()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonSummary {
    #[serde(serialize_with = "fixed_vec")]
    pub data_distribution: Vec<f64>,
    pub arms: Vec<ArmSummary>,
    /// CE ends with a lower `KL(P_data || pi)` than both other arms.
    pub ce_kl_lowest: bool,
    pub hyperparameters: SandboxConfig,
    pub hyperparameter_note: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub traces: Vec<TrainTrace>,
    pub summary: ComparisonSummary,
}

fn train(
    method: TrainMethod,
    init: &ToyPolicy,
    task: &ToyTask,
    config: &SandboxConfig,
    stream: u64,
) -> Result<TrainTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let mut policy = init.clone();
    let steps = match method {
        TrainMethod::Ce => config.ce.steps,
        TrainMethod::Advantage => config.advantage.steps,
        TrainMethod::Dpo => config.dpo.steps,
    };
    let every = config.trace_every.max(1);
    let mut points = vec![trace_point(0, method, &policy, task)];
    for step in 1..=steps {
        match method {
            TrainMethod::Ce => ce_step(
                &mut policy,
                task,
                config.ce.batch_size,
                config.ce.lr,
                &mut rng,
            )?,
            TrainMethod::Advantage => {
                advantage_step(&mut policy, task, &config.advantage, &mut rng)?
            }
            TrainMethod::Dpo => {
                if let Some((w, l)) = config.dpo.preference {
                    dpo_step(&mut policy, task, w, l, config.dpo.beta, config.dpo.lr)?
                }
            }
        }
        if step % every == 0 || step == steps {
            points.push(trace_point(step, method, &policy, task));
        }
    }
    Ok(TrainTrace {
        method,
        points,
        policy,
    })
}

/// Trains the three arms from the same initial policy with a fixed seed.
pub fn run_paradigm_comparison(task: &ToyTask, config: &SandboxConfig) -> Result<Comparison> {
    let k = task.num_options();
    let init = match &config.init_logits {
        Some(l) if l.len() != k => {
            return Err(invalid(format!(
                "init_logits has {} entries, task has {k}",
                l.len()
            )))
        }
        Some(l) => ToyPolicy::new(l.clone())?,
        None => ToyPolicy::uniform(k)?,
    };
    if let Some((w, l)) = config.dpo.preference {
        check_index(w, k, "preferred option")?;
        check_index(l, k, "rejected option")?;
    }
    let methods = [TrainMethod::Ce, TrainMethod::Advantage, TrainMethod::Dpo];
    let traces = methods
        .iter()
        .enumerate()
        .map(|(i, &m)| train(m, &init, task, config, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let arms: Vec<ArmSummary> = traces
        .iter()
        .map(|t| {
            let last = t.points.last().expect("trace has step 0");
            ArmSummary {
                method: t.method,
                steps: last.step,
                final_kl: last.kl,
                final_max_prob: last.max_prob,
                final_ece_proxy: last.ece_proxy,
                final_probs: t.policy.probs(),
            }
        })
        .collect();
    let ce_kl_lowest = arms[0].final_kl < arms[1].final_kl && arms[0].final_kl < arms[2].final_kl;
    Ok(Comparison {
        traces,
        summary: ComparisonSummary {
            data_distribution: task.data().to_vec(),
            arms,
            ce_kl_lowest,
            hyperparameters: config.clone(),
            hyperparameter_note: "sandbox choices; not taken from any real training run",
        },
    })
}

pub fn trace_csv(traces: &[TrainTrace]) -> String {
    let mut out = String::from("step,method,kl,max_prob,ece_proxy\n");
    for t in traces {
        for p in &t.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.step,
                p.method.name(),
                fixed::format(p.kl),
                fixed::format(p.max_prob),
                fixed::format(p.ece_proxy)
            );
        }
    }
    out
}

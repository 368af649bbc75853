//! Batch runner and metrics: pass@k, cost and context means, domain
//! aggregation, episode logs, and the rule-based policies used for desk runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::TaskRecord;
use crate::grammar::{
    serialize_trajectory, ObsBlock, PlanBlock, RouteBlock, Subtask, TrajectoryDoc, TRAJECTORY_EXTENSION,
};
use crate::pool::{PoolRegistry, Usd};
use crate::reward::{
    normalize_cost, shaping_score, terminal_reward, turn_shaping, NormalizerConfig, NormalizerState, RewardReport,
    ShapingEvent,
};
use crate::scheduler::{
    run_episode, ActionKind, EpisodeConfig, EpisodeOutcome, EpisodeSpec, Policy, PolicyAction, PolicyView,
    SchedulerError, VerifyNote, WorkerCard,
};
use crate::verify::{verify, GoldKind, QaScoring};
use crate::workers::{mix_seed, ResponseStatus, UsageRecord, WorkerBackend};

pub const EPISODE_DIR: &str = "episodes";
pub const REWARDS_FILE: &str = "rewards.jsonl";
pub const SCOREBOARD_FILE: &str = "scoreboard.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("task {task_id} has {have} attempts, pass@{k} needs {k}")]
    InsufficientAttempts { task_id: String, have: usize, k: usize },
    #[error("no samples")]
    NoSamples,
    #[error("benchmark {0} is missing from the grouping")]
    MissingBenchmark(String),
    #[error("benchmark {0} is listed twice in the grouping")]
    DuplicateBenchmark(String),
    #[error("invalid batch config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown policy `{0}` (expected direct, rule or chain)")]
    UnknownPolicy(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One attempt at a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub b: bool,
    pub cost_usd: Usd,
    pub context_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSample {
    pub task_id: String,
    pub benchmark: String,
    /// Independent attempts in run order.
    pub attempts: Vec<Attempt>,
}

/// Fraction of samples solved within their first `k` attempts.
pub fn pass_at_k(samples: &[RunSample], k: usize) -> Result<f64, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::NoSamples);
    }
    let mut solved = 0usize;
    for s in samples {
        if k == 0 || s.attempts.len() < k {
            return Err(HarnessError::InsufficientAttempts {
                task_id: s.task_id.clone(),
                have: s.attempts.len(),
                k,
            });
        }
        if s.attempts[..k].iter().any(|a| a.b) {
            solved += 1;
        }
    }
    Ok(solved as f64 / samples.len() as f64)
}

/// pass@1 estimated as the mean verdict over every attempt of every sample.
pub fn pass1_mean_over_attempts(samples: &[RunSample]) -> Result<f64, HarnessError> {
    let mut per_task = Vec::with_capacity(samples.len());
    for s in samples {
        if s.attempts.is_empty() {
            return Err(HarnessError::InsufficientAttempts {
                task_id: s.task_id.clone(),
                have: 0,
                k: 1,
            });
        }
        per_task.push(s.attempts.iter().filter(|a| a.b).count() as f64 / s.attempts.len() as f64);
    }
    if per_task.is_empty() {
        return Err(HarnessError::NoSamples);
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub benchmark: String,
    pub tasks: usize,
    pub pass1: f64,
    /// Absent when some task has a single attempt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass2: Option<f64>,
    /// Mean router context tokens per attempt.
    pub mean_tokens: f64,
    /// Mean billed USD per attempt.
    pub mean_usd: f64,
}

/// Per-benchmark rows in first-appearance order.
pub fn benchmark_rows(samples: &[RunSample], pass1_mean: bool) -> Result<Vec<BenchmarkRow>, HarnessError> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<RunSample>> = BTreeMap::new();
    for s in samples {
        if !groups.contains_key(s.benchmark.as_str()) {
            order.push(&s.benchmark);
        }
        groups.entry(&s.benchmark).or_default().push(s.clone());
    }
    order
        .into_iter()
        .map(|name| {
            let group = &groups[name];
            let pass1 = if pass1_mean {
                pass1_mean_over_attempts(group)?
            } else {
                pass_at_k(group, 1)?
            };
            let pass2 = if group.iter().all(|s| s.attempts.len() >= 2) {
                Some(pass_at_k(group, 2)?)
            } else {
                None
            };
            let attempts: Vec<&Attempt> = group.iter().flat_map(|s| &s.attempts).collect();
            let n = attempts.len() as f64;
            let tokens: u64 = attempts.iter().map(|a| a.context_tokens).sum();
            let usd: Usd = attempts.iter().map(|a| a.cost_usd).sum();
            Ok(BenchmarkRow {
                benchmark: name.to_string(),
                tasks: group.len(),
                pass1,
                pass2,
                mean_tokens: tokens as f64 / n,
                mean_usd: usd.as_f64() / n,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingEntry {
    pub benchmark: String,
    pub domain: String,
    /// Reported but kept out of every mean.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub excluded: bool,
}

/// Benchmark to domain map, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GroupingEntry>", into = "Vec<GroupingEntry>")]
pub struct Grouping {
    entries: Vec<GroupingEntry>,
}

impl TryFrom<Vec<GroupingEntry>> for Grouping {
    type Error = HarnessError;
    fn try_from(entries: Vec<GroupingEntry>) -> Result<Self, HarnessError> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.benchmark.as_str()) {
                return Err(HarnessError::DuplicateBenchmark(e.benchmark.clone()));
            }
        }
        Ok(Self { entries })
    }
}

impl From<Grouping> for Vec<GroupingEntry> {
    fn from(g: Grouping) -> Self {
        g.entries
    }
}

impl Grouping {
    pub fn new(entries: Vec<GroupingEntry>) -> Result<Self, HarnessError> {
        Self::try_from(entries)
    }

    /// Each benchmark in its own domain.
    pub fn singleton(benchmarks: &[&str]) -> Self {
        Self {
            entries: benchmarks
                .iter()
                .map(|b| GroupingEntry {
                    benchmark: b.to_string(),
                    domain: b.to_string(),
                    excluded: false,
                })
                .collect(),
        }
    }

    pub fn entries(&self) -> &[GroupingEntry] {
        &self.entries
    }

    pub fn get(&self, benchmark: &str) -> Option<&GroupingEntry> {
        self.entries.iter().find(|e| e.benchmark == benchmark)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let entries: Vec<GroupingEntry> = serde_json::from_str(text).map_err(|e| HarnessError::Parse {
            path: PathBuf::from("<grouping>"),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Parse { line, message, .. } => HarnessError::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBenchmark {
    pub domain: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub excluded: bool,
    #[serde(flatten)]
    pub row: BenchmarkRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain: String,
    pub benchmarks: Vec<String>,
    pub pass1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass2: Option<f64>,
    pub mean_tokens: f64,
    pub mean_usd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scoreboard {
    pub benchmarks: Vec<ScoredBenchmark>,
    pub domains: Vec<DomainRow>,
    /// Uniform means over every non-excluded benchmark.
    pub overall: DomainRow,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn fold_rows(domain: &str, rows: &[&BenchmarkRow]) -> DomainRow {
    DomainRow {
        domain: domain.to_string(),
        benchmarks: rows.iter().map(|r| r.benchmark.clone()).collect(),
        pass1: mean(rows.iter().map(|r| r.pass1)),
        pass2: rows
            .iter()
            .map(|r| r.pass2)
            .collect::<Option<Vec<f64>>>()
            .map(|v| mean(v.into_iter())),
        mean_tokens: mean(rows.iter().map(|r| r.mean_tokens)),
        mean_usd: mean(rows.iter().map(|r| r.mean_usd)),
    }
}

/// Domain values are unweighted means of their benchmarks; the overall row
/// averages benchmarks uniformly. Domains follow grouping order.
pub fn aggregate_domains(rows: &[BenchmarkRow], grouping: &Grouping) -> Result<Scoreboard, HarnessError> {
    let mut benchmarks = Vec::with_capacity(rows.len());
    for row in rows {
        let entry = grouping
            .get(&row.benchmark)
            .ok_or_else(|| HarnessError::MissingBenchmark(row.benchmark.clone()))?;
        benchmarks.push(ScoredBenchmark {
            domain: entry.domain.clone(),
            excluded: entry.excluded,
            row: row.clone(),
        });
    }
    let mut domain_order: Vec<&str> = Vec::new();
    for e in grouping.entries() {
        if !e.excluded && !domain_order.contains(&e.domain.as_str()) {
            domain_order.push(&e.domain);
        }
    }
    let domains = domain_order
        .into_iter()
        .filter_map(|d| {
            // grouping order inside the domain, not row order
            let members: Vec<&BenchmarkRow> = grouping
                .entries()
                .iter()
                .filter(|e| e.domain == d && !e.excluded)
                .filter_map(|e| rows.iter().find(|r| r.benchmark == e.benchmark))
                .collect();
            (!members.is_empty()).then(|| fold_rows(d, &members))
        })
        .collect();
    let included: Vec<&BenchmarkRow> = benchmarks.iter().filter(|b| !b.excluded).map(|b| &b.row).collect();
    let overall = fold_rows("overall", &included);
    Ok(Scoreboard {
        benchmarks,
        domains,
        overall,
    })
}

/// First record of every episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub episode_id: String,
    pub task_id: String,
    pub attempt: u32,
    /// Position in the batch; rewards replay in this order.
    pub seq: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchLog {
    pub episode_id: String,
    pub turn: u32,
    pub action_kind: ActionKind,
    pub subtask_id: u32,
    pub worker_label: String,
    pub worker_id: String,
    pub primitive: String,
    pub usage: UsageRecord,
    pub cost_usd: Usd,
    pub status: ResponseStatus,
    /// Worker-reported latency, so replays stay byte-identical.
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnLog {
    pub episode_id: String,
    pub turn: u32,
    pub action_kind: ActionKind,
    pub valid: bool,
    pub events: Vec<ShapingEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Episode(EpisodeHeader),
    Turn(TurnLog),
    Dispatch(DispatchLog),
    Error { episode_id: String, message: String },
    Reward(RewardReport),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeArtifact {
    pub episode_id: String,
    pub records: Vec<LogRecord>,
    /// Canonical trajectory; `None` when the episode failed before producing one.
    pub trajectory: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchConfig {
    pub attempts: u32,
    pub seed: u64,
    pub episode: EpisodeConfig,
    pub normalizer: NormalizerConfig,
    pub alpha: f64,
    pub eta: f64,
    pub qa: QaScoring,
    /// Concurrent episodes; 0 means available parallelism.
    pub max_parallel: usize,
    pub pass1_mean: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            attempts: 2,
            seed: 0,
            episode: EpisodeConfig::default(),
            normalizer: NormalizerConfig::default(),
            alpha: 0.1,
            eta: 0.05,
            qa: QaScoring::default(),
            max_parallel: 0,
            pass1_mean: false,
        }
    }
}

impl BatchConfig {
    pub fn from_config(cfg: &crate::config::OrchestraConfig) -> Self {
        Self {
            attempts: cfg.harness.attempts,
            seed: 0,
            episode: cfg.episode.to_episode_config(),
            normalizer: cfg.normalizer,
            alpha: cfg.reward.alpha,
            eta: cfg.reward.eta,
            qa: cfg.harness.qa_scoring,
            max_parallel: cfg.harness.max_parallel,
            pass1_mean: cfg.harness.pass1_mean_over_attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub samples: Vec<RunSample>,
    pub reports: Vec<RewardReport>,
    pub episodes: Vec<EpisodeArtifact>,
    pub scoreboard: Scoreboard,
}

/// Builds a fresh policy for each episode.
pub type PolicyFactory<'a> = dyn Fn(&TaskRecord) -> Box<dyn Policy> + Sync + 'a;

pub fn attempt_seed(batch_seed: u64, task_id: &str, attempt: u32) -> u64 {
    mix_seed(&[&batch_seed.to_le_bytes(), task_id.as_bytes(), &attempt.to_le_bytes()])
}

pub fn episode_id(task_id: &str, attempt: u32) -> String {
    format!("{task_id}-a{attempt}")
}

fn episode_records(id: &str, outcome: &EpisodeOutcome) -> Vec<LogRecord> {
    let mut out = Vec::new();
    for t in &outcome.turns {
        out.push(LogRecord::Turn(TurnLog {
            episode_id: id.to_string(),
            turn: t.turn,
            action_kind: t.action.kind,
            valid: t.is_valid(),
            events: t.events.clone(),
        }));
        for d in &t.dispatches {
            out.push(LogRecord::Dispatch(DispatchLog {
                episode_id: id.to_string(),
                turn: t.turn,
                action_kind: t.action.kind,
                subtask_id: d.route.subtask_id,
                worker_label: d.worker_label.clone(),
                worker_id: d.route.model.clone(),
                primitive: d.route.skill.clone(),
                usage: d.response.usage,
                cost_usd: d.cost_usd,
                status: d.response.status,
                wall_ms: d.response.latency_ms,
            }));
        }
    }
    out
}

/// Runs every task `attempts` times as independently seeded episodes. Episode
/// failures are logged and scored b=0; only config errors abort. Rewards are
/// computed afterwards in task order so the cost normalizer replays exactly.
pub async fn run_batch(
    tasks: &[TaskRecord],
    policy: &PolicyFactory<'_>,
    registry: &PoolRegistry,
    backend: &dyn WorkerBackend,
    config: &BatchConfig,
    grouping: Option<&Grouping>,
) -> Result<BatchOutput, HarnessError> {
    if config.attempts == 0 {
        return Err(HarnessError::Config("attempts must be at least 1".into()));
    }
    if config.episode.t_max == 0 || config.episode.context_budget == 0 {
        return Err(HarnessError::Config("t_max and context budget must be positive".into()));
    }
    let mut normalizer = NormalizerState::new(config.normalizer).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut seen = BTreeSet::new();
    if let Some(t) = tasks.iter().find(|t| !seen.insert(t.task_id.as_str())) {
        return Err(HarnessError::Config(format!("task {} appears twice", t.task_id)));
    }

    let jobs: Vec<(u64, &TaskRecord, u32)> = tasks
        .iter()
        .flat_map(|t| (1..=config.attempts).map(move |a| (t, a)))
        .enumerate()
        .map(|(seq, (t, a))| (seq as u64, t, a))
        .collect();
    let parallel = match config.max_parallel {
        0 => std::thread::available_parallelism().map_or(4, |n| n.get()),
        n => n,
    };
    let results: Vec<_> = stream::iter(jobs.iter().map(|&(seq, task, attempt)| async move {
        let spec = EpisodeSpec {
            episode_id: episode_id(&task.task_id, attempt),
            seed: attempt_seed(config.seed, &task.task_id, attempt),
        };
        let mut p = policy(task);
        let result = run_episode(&task.query, p.as_mut(), registry, backend, &config.episode, &spec).await;
        (seq, task, attempt, spec, result)
    }))
    .buffered(parallel)
    .collect()
    .await;

    let mut samples: Vec<RunSample> = Vec::new();
    let mut reports = Vec::with_capacity(results.len());
    let mut episodes = Vec::with_capacity(results.len());
    for (seq, task, attempt, spec, result) in results {
        let header = LogRecord::Episode(EpisodeHeader {
            episode_id: spec.episode_id.clone(),
            task_id: task.task_id.clone(),
            attempt,
            seq,
            seed: spec.seed,
        });
        let (mut records, trajectory, report) = match result {
            Ok((doc, outcome)) => score_episode(task, attempt, &doc, &outcome, registry, config, &mut normalizer),
            Err(err) => failed_episode(task, attempt, &spec.episode_id, &err),
        };
        records.insert(0, header);
        records.push(LogRecord::Reward(report.clone()));
        if samples.last().is_none_or(|s| s.task_id != task.task_id) {
            samples.push(RunSample {
                task_id: task.task_id.clone(),
                benchmark: task.benchmark().to_string(),
                attempts: Vec::new(),
            });
        }
        samples.last_mut().expect("pushed above").attempts.push(Attempt {
            b: report.b,
            cost_usd: report.c_usd,
            context_tokens: report.context_tokens,
        });
        reports.push(report);
        episodes.push(EpisodeArtifact {
            episode_id: spec.episode_id,
            records,
            trajectory,
        });
    }

    let rows = benchmark_rows(&samples, config.pass1_mean)?;
    let fallback;
    let grouping = match grouping {
        Some(g) => g,
        None => {
            let names: Vec<&str> = rows.iter().map(|r| r.benchmark.as_str()).collect();
            fallback = Grouping::singleton(&names);
            &fallback
        }
    };
    let scoreboard = aggregate_domains(&rows, grouping)?;
    Ok(BatchOutput {
        samples,
        reports,
        episodes,
        scoreboard,
    })
}

fn score_episode(
    task: &TaskRecord,
    attempt: u32,
    doc: &TrajectoryDoc,
    outcome: &EpisodeOutcome,
    registry: &PoolRegistry,
    config: &BatchConfig,
    normalizer: &mut NormalizerState,
) -> (Vec<LogRecord>, Option<String>, RewardReport) {
    let mut records = episode_records(&outcome.episode_id, outcome);
    let verdict = verify(&outcome.final_answer, &task.gold, config.qa);
    let cost = outcome.ledger.total();
    let c_hat = normalize_cost(normalizer, cost);
    normalizer.push(cost);
    let s = shaping_score(doc, registry);
    let per_turn_r = outcome
        .turns
        .iter()
        .map(|t| turn_shaping(t, config.eta).map(|sig| sig.r).unwrap_or(0.0))
        .collect();
    let r = terminal_reward(verdict.b, c_hat, s, config.alpha).map_or(0.0, |t| t.value);
    let trajectory = match serialize_trajectory(doc) {
        Ok(text) => Some(text),
        Err(e) => {
            records.push(LogRecord::Error {
                episode_id: outcome.episode_id.clone(),
                message: format!("trajectory not serializable: {e}"),
            });
            None
        }
    };
    let report = RewardReport {
        episode_id: outcome.episode_id.clone(),
        task_id: task.task_id.clone(),
        attempt,
        benchmark: task.benchmark().to_string(),
        b: verdict.b,
        c_usd: cost,
        c_hat,
        shaping_s: s,
        r,
        per_turn_r,
        context_tokens: outcome.context_tokens,
        infra: verdict.infra,
    };
    (records, trajectory, report)
}

fn failed_episode(
    task: &TaskRecord,
    attempt: u32,
    id: &str,
    err: &SchedulerError,
) -> (Vec<LogRecord>, Option<String>, RewardReport) {
    let records = vec![LogRecord::Error {
        episode_id: id.to_string(),
        message: err.to_string(),
    }];
    let report = RewardReport {
        episode_id: id.to_string(),
        task_id: task.task_id.clone(),
        attempt,
        benchmark: task.benchmark().to_string(),
        b: false,
        c_usd: Usd::ZERO,
        c_hat: 0.0,
        shaping_s: 0.0,
        r: 0.0,
        per_turn_r: Vec::new(),
        context_tokens: 0,
        infra: true,
    };
    (records, None, report)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).expect("log records serialize");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Writes `episodes/<id>.jsonl`, `episodes/<id>.traj.xml`, `rewards.jsonl`
/// and `scoreboard.json` under `dir`.
pub fn write_batch(output: &BatchOutput, dir: &Path) -> Result<(), HarnessError> {
    let ep_dir = dir.join(EPISODE_DIR);
    fs::create_dir_all(&ep_dir).map_err(io_err(&ep_dir))?;
    for ep in &output.episodes {
        write_jsonl(&ep_dir.join(format!("{}.jsonl", ep.episode_id)), &ep.records)?;
        if let Some(traj) = &ep.trajectory {
            let path = ep_dir.join(format!("{}{TRAJECTORY_EXTENSION}", ep.episode_id));
            fs::write(&path, traj).map_err(io_err(&path))?;
        }
    }
    write_jsonl(&dir.join(REWARDS_FILE), &output.reports)?;
    let path = dir.join(SCOREBOARD_FILE);
    let mut text = serde_json::to_string_pretty(&output.scoreboard).expect("scoreboard serializes");
    text.push('\n');
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(text.as_bytes()).map_err(io_err(&path))
}

/// Every episode log under `dir` (or `dir/episodes`), header first, sorted by
/// batch position.
pub fn read_episode_logs(dir: &Path) -> Result<Vec<Vec<LogRecord>>, HarnessError> {
    let ep_dir = if dir.join(EPISODE_DIR).is_dir() {
        dir.join(EPISODE_DIR)
    } else {
        dir.to_path_buf()
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(&ep_dir)
        .map_err(io_err(&ep_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut logs = Vec::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: LogRecord = serde_json::from_str(line).map_err(|e| HarnessError::Parse {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        logs.push(records);
    }
    let seq = |log: &Vec<LogRecord>| match log.first() {
        Some(LogRecord::Episode(h)) => h.seq,
        _ => u64::MAX,
    };
    logs.sort_by_key(seq);
    Ok(logs)
}

/// Reward reports of the logs, in batch order.
pub fn rewards_from_logs(logs: &[Vec<LogRecord>]) -> Vec<RewardReport> {
    logs.iter()
        .filter_map(|log| {
            log.iter().rev().find_map(|r| match r {
                LogRecord::Reward(rep) => Some(rep.clone()),
                _ => None,
            })
        })
        .collect()
}

/// Rebuilds run samples from reward reports, grouping attempts by task.
pub fn samples_from_reports(reports: &[RewardReport]) -> Vec<RunSample> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_task: BTreeMap<&str, Vec<&RewardReport>> = BTreeMap::new();
    for r in reports {
        if !by_task.contains_key(r.task_id.as_str()) {
            order.push(&r.task_id);
        }
        by_task.entry(&r.task_id).or_default().push(r);
    }
    order
        .into_iter()
        .map(|t| {
            let mut reps = by_task[t].clone();
            reps.sort_by_key(|r| r.attempt);
            RunSample {
                task_id: t.to_string(),
                benchmark: reps[0].benchmark.clone(),
                attempts: reps
                    .iter()
                    .map(|r| Attempt {
                        b: r.b,
                        cost_usd: r.c_usd,
                        context_tokens: r.context_tokens,
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Scoreboard recomputed from the logs alone.
pub fn report_from_logs(dir: &Path, grouping: Option<&Grouping>, pass1_mean: bool) -> Result<Scoreboard, HarnessError> {
    let logs = read_episode_logs(dir)?;
    let samples = samples_from_reports(&rewards_from_logs(&logs));
    let rows = benchmark_rows(&samples, pass1_mean)?;
    match grouping {
        Some(g) => aggregate_domains(&rows, g),
        None => {
            let names: Vec<&str> = rows.iter().map(|r| r.benchmark.as_str()).collect();
            aggregate_domains(&rows, &Grouping::singleton(&names))
        }
    }
}

/// Replays the cost normalizer over reports in order and recomputes ĉ and R
/// for a new α. Infra-failed episodes keep R = 0 and stay out of the buffer.
pub fn recompute_rewards(
    reports: &[RewardReport],
    normalizer: NormalizerConfig,
    alpha: f64,
) -> Result<Vec<RewardReport>, HarnessError> {
    let mut state = NormalizerState::new(normalizer).map_err(|e| HarnessError::Config(e.to_string()))?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(HarnessError::Config("alpha must lie in [0, 1]".into()));
    }
    Ok(reports
        .iter()
        .map(|rep| {
            let mut out = rep.clone();
            if rep.infra && rep.per_turn_r.is_empty() {
                return out;
            }
            out.c_hat = normalize_cost(&state, rep.c_usd);
            state.push(rep.c_usd);
            out.r = terminal_reward(rep.b, out.c_hat, rep.shaping_s, alpha).map_or(0.0, |t| t.value);
            out
        })
        .collect())
}

/// pass@k probe verdict per task: `None` when every attempt was infra-failed.
pub fn probe_verdicts(reports: &[RewardReport]) -> Vec<(String, Option<bool>)> {
    let mut order: Vec<&str> = Vec::new();
    let mut acc: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for r in reports {
        let e = acc.entry(&r.task_id).or_insert_with(|| {
            order.push(&r.task_id);
            (false, true)
        });
        e.0 |= r.b;
        e.1 &= r.infra;
    }
    order
        .into_iter()
        .map(|t| {
            let (pass, all_infra) = acc[t];
            (t.to_string(), (!all_infra).then_some(pass))
        })
        .collect()
}

/// Primitive preference for a task, by verifier kind.
pub fn preferred_skills(kind: GoldKind) -> Vec<String> {
    let list: &[&str] = match kind {
        GoldKind::Math => &["symbolic_math", "reason", "direct_answer"],
        GoldKind::Qa => &["reason", "web_search", "direct_answer"],
        GoldKind::Code => &["execute_python", "read_code", "reason"],
        GoldKind::ToolSchema => &["call_api", "parse_structured", "reason"],
    };
    list.iter().map(|s| s.to_string()).collect()
}

fn pick<'a>(cards: &'a [WorkerCard], skills: &'a [String], rank: usize) -> Option<(&'a str, &'a str)> {
    for skill in skills {
        let able: Vec<&WorkerCard> = cards.iter().filter(|c| c.skills.contains(skill)).collect();
        if !able.is_empty() {
            let card = able[rank % able.len()];
            return Some((&card.label, skill));
        }
    }
    None
}

fn split_parts(query: &str) -> Vec<String> {
    query
        .split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect()
}

fn is_error(obs: &str) -> bool {
    obs.starts_with("[error:")
}

/// One subtask carrying the whole query, then the final answer.
pub struct DirectPolicy {
    skills: Vec<String>,
    target: Option<u32>,
}

impl DirectPolicy {
    pub fn new(skills: Vec<String>) -> Self {
        Self { skills, target: None }
    }
}

impl Policy for DirectPolicy {
    fn act(&mut self, view: &PolicyView<'_>) -> PolicyAction {
        if let Some(id) = self.target {
            return PolicyAction::final_answer(view.observations.get(&id).map_or("", String::as_str));
        }
        let Some((label, skill)) = pick(view.workers, &self.skills, 0) else {
            return PolicyAction::direct_answer("");
        };
        let id = view.next_subtask_id;
        self.target = Some(id);
        PolicyAction::decompose(
            PlanBlock {
                subtasks: vec![Subtask {
                    id,
                    depends_on: BTreeSet::new(),
                    description: view.query.to_string(),
                }],
            },
            vec![RouteBlock::new(id, label, skill, view.query)],
        )
    }
}

/// Splits the query on `;` into parallel subtasks plus one aggregating
/// subtask over the whole query. A failed aggregate triggers up to
/// `max_repairs` replans on the next capable worker.
pub struct RulePolicy {
    skills: Vec<String>,
    max_repairs: usize,
    repairs: usize,
    target: Option<u32>,
}

impl RulePolicy {
    pub fn new(skills: Vec<String>) -> Self {
        Self {
            skills,
            max_repairs: 1,
            repairs: 0,
            target: None,
        }
    }
}

impl Policy for RulePolicy {
    fn act(&mut self, view: &PolicyView<'_>) -> PolicyAction {
        let next = view.next_subtask_id;
        if view.awaiting_repair {
            self.repairs += 1;
            let Some((label, skill)) = pick(view.workers, &self.skills, self.repairs) else {
                return PolicyAction::final_answer("");
            };
            self.target = Some(next);
            return PolicyAction::repair(
                PlanBlock {
                    subtasks: vec![Subtask {
                        id: next,
                        depends_on: BTreeSet::new(),
                        description: format!("retry: {}", view.query),
                    }],
                },
                vec![RouteBlock::new(next, label, skill, view.query)],
            );
        }
        if let Some(id) = self.target {
            return PolicyAction::final_answer(view.observations.get(&id).map_or("", String::as_str));
        }
        let parts = split_parts(view.query);
        let mut subtasks = Vec::new();
        let mut routes = Vec::new();
        if parts.len() > 1 {
            for (i, part) in parts.iter().enumerate() {
                let Some((label, skill)) = pick(view.workers, &self.skills, i) else {
                    return PolicyAction::direct_answer("");
                };
                let id = next + i as u32;
                subtasks.push(Subtask {
                    id,
                    depends_on: BTreeSet::new(),
                    description: part.clone(),
                });
                routes.push(RouteBlock::new(id, label, skill, part));
            }
        }
        let agg = next + subtasks.len() as u32;
        let Some((label, skill)) = pick(view.workers, &self.skills, 0) else {
            return PolicyAction::direct_answer("");
        };
        subtasks.push(Subtask {
            id: agg,
            depends_on: (next..agg).collect(),
            description: view.query.to_string(),
        });
        routes.push(RouteBlock::new(agg, label, skill, view.query));
        self.target = Some(agg);
        PolicyAction::decompose(PlanBlock { subtasks }, routes)
    }

    fn verify(&mut self, _view: &PolicyView<'_>, observations: &[ObsBlock]) -> Option<VerifyNote> {
        let target = self.target?;
        let obs = observations.iter().find(|o| o.subtask_id == target)?;
        if is_error(&obs.body) && self.repairs < self.max_repairs {
            Some(VerifyNote {
                body: format!("subtask {target} failed: {}", obs.body),
                replan: true,
            })
        } else {
            Some(VerifyNote {
                body: format!("subtask {target} answered"),
                replan: false,
            })
        }
    }
}

/// Continuation chain: one route per turn over the `;` parts, then the whole
/// query, each conditioned on the previous observation.
pub struct ChainPolicy {
    skills: Vec<String>,
    step: usize,
    last: Option<u32>,
}

impl ChainPolicy {
    pub fn new(skills: Vec<String>) -> Self {
        Self {
            skills,
            step: 0,
            last: None,
        }
    }
}

impl Policy for ChainPolicy {
    fn act(&mut self, view: &PolicyView<'_>) -> PolicyAction {
        let mut steps = split_parts(view.query);
        if steps.len() > 1 {
            steps.push(view.query.to_string());
        } else {
            steps = vec![view.query.to_string()];
        }
        if self.step >= steps.len() {
            let answer = self.last.and_then(|id| view.observations.get(&id));
            return PolicyAction::final_answer(answer.map_or("", String::as_str));
        }
        let Some((label, skill)) = pick(view.workers, &self.skills, self.step) else {
            return PolicyAction::direct_answer("");
        };
        let id = view.next_subtask_id;
        self.last = Some(id);
        let payload = steps[self.step].clone();
        self.step += 1;
        PolicyAction::continuation(RouteBlock::new(id, label, skill, &payload))
    }
}

pub const POLICY_NAMES: [&str; 3] = ["direct", "rule", "chain"];

/// Policy for `name`, with primitive preferences taken from the task's verifier.
pub fn builtin_policy(name: &str, task: &TaskRecord) -> Result<Box<dyn Policy>, HarnessError> {
    let skills = preferred_skills(task.gold.kind);
    match name {
        "direct" => Ok(Box::new(DirectPolicy::new(skills))),
        "rule" => Ok(Box::new(RulePolicy::new(skills))),
        "chain" => Ok(Box::new(ChainPolicy::new(skills))),
        other => Err(HarnessError::UnknownPolicy(other.to_string())),
    }
}

/// Tasks from a JSONL file, one record per line.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskRecord>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

//! `orchestra` command line: grammar checks, batch runs, reward replays,
//! advantage tables, curriculum manifests and scoreboards.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use orchestra::config::OrchestraConfig;
use orchestra::credit::{compute_advantages, Estimator, RolloutGroup};
use orchestra::curriculum::{
    cascade_promote, probe_split, record_augmentation, AugmentationRollout, ProbeResult, RetryResult, TaskRecord,
};
use orchestra::grammar::{
    behaviour_frequencies, classify_behaviour, parse_trajectory, read_corpus, validate_trajectory, Behaviour,
};
use orchestra::harness::{
    builtin_policy, load_tasks, read_episode_logs, recompute_rewards, report_from_logs, rewards_from_logs, run_batch,
    write_batch, BatchConfig, Grouping, POLICY_NAMES,
};
use orchestra::pool::{load_registry, PoolRegistry};
use orchestra::workers::BackendRouter;

#[derive(Parser)]
#[command(name = "orchestra", version, about = "Selective-delegation orchestration runtime")]
struct Cli {
    /// Run configuration (TOML). Defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Grpo,
    Tree,
    Mt,
    Gigpo,
    Agentic,
    AgenticShaped,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Grpo => Estimator::Grpo,
            EstimatorArg::Tree => Estimator::Tree,
            EstimatorArg::Mt => Estimator::Mt,
            EstimatorArg::Gigpo => Estimator::Gigpo,
            EstimatorArg::Agentic => Estimator::Agentic,
            EstimatorArg::AgenticShaped => Estimator::AgenticShaped,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check trajectories against the grammar. Exit code 1 on any violation.
    Validate {
        /// A `.traj.xml` file, a `===`-separated stream, or a directory.
        path: PathBuf,
        /// Also resolve models and skills against this pool.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Print behaviour-mode counts.
        #[arg(long)]
        classify: bool,
    },
    /// Run every task as independent seeded episodes and write logs.
    Run {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value = "rule")]
        policy: String,
        #[arg(long)]
        attempts: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grouping: Option<PathBuf>,
    },
    /// Replay rewards from episode logs with a new cost weight.
    Reward {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Advantage table for one rollout group (JSON).
    Advantage {
        #[arg(long)]
        group: PathBuf,
        #[arg(long, value_enum)]
        estimator: EstimatorArg,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Split probed tasks into SFT and RL pools.
    Curriculum {
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cascade retries (JSONL), in teacher order.
        #[arg(long)]
        retries: Option<PathBuf>,
        /// Extra teacher rollouts of SFT tasks (JSONL).
        #[arg(long)]
        augment: Option<PathBuf>,
    },
    /// Recompute the scoreboard from episode logs.
    Report {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        grouping: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn load_pool(path: &Path) -> Result<PoolRegistry> {
    load_registry(&read(path)?).with_context(|| format!("loading pool {}", path.display()))
}

fn validate(path: &Path, pool: Option<&Path>, classify: bool) -> Result<bool> {
    let registry = pool.map(load_pool).transpose()?;
    let corpus = read_corpus(path).with_context(|| format!("reading {}", path.display()))?;
    if corpus.is_empty() {
        bail!("no trajectories found under {}", path.display());
    }
    let mut ok = true;
    let mut labels: Vec<Behaviour> = Vec::new();
    for entry in &corpus {
        let doc = match parse_trajectory(&entry.raw) {
            Ok(doc) => doc,
            Err(e) => {
                ok = false;
                println!("{}: parse error: {e}", entry.source);
                continue;
            }
        };
        let report = validate_trajectory(&doc, registry.as_ref());
        if report.valid {
            if classify {
                labels.push(classify_behaviour(&doc)?);
            }
        } else {
            ok = false;
            for v in &report.violations {
                println!("{}: {} at {}: {}", entry.source, v.code.as_str(), v.location, v.message);
            }
        }
    }
    println!(
        "{} documents, {}",
        corpus.len(),
        if ok { "all valid" } else { "violations found" }
    );
    if classify {
        for (label, n) in behaviour_frequencies(&labels) {
            println!("{:<14} {n}", label.as_str());
        }
    }
    Ok(ok)
}

async fn run(cfg: &OrchestraConfig, args: RunArgs) -> Result<()> {
    if !POLICY_NAMES.contains(&args.policy.as_str()) {
        bail!(
            "unknown policy `{}` (expected one of {})",
            args.policy,
            POLICY_NAMES.join(", ")
        );
    }
    let tasks = load_tasks(&args.tasks)?;
    let registry = Arc::new(load_pool(&args.pool)?);
    let backend = BackendRouter::from_registry(registry.clone(), 16)?;
    let grouping = args.grouping.as_deref().map(Grouping::load).transpose()?;
    let mut batch = BatchConfig::from_config(cfg);
    batch.seed = args.seed;
    if let Some(a) = args.attempts {
        batch.attempts = a;
    }
    let name = args.policy.clone();
    let factory = move |t: &TaskRecord| builtin_policy(&name, t).expect("policy name checked above");
    let output = run_batch(&tasks, &factory, &registry, &backend, &batch, grouping.as_ref()).await?;
    write_batch(&output, &args.out)?;
    println!(
        "{} tasks x {} attempts -> {}",
        tasks.len(),
        batch.attempts,
        args.out.display()
    );
    println!("{}", serde_json::to_string_pretty(&output.scoreboard.overall)?);
    Ok(())
}

struct RunArgs {
    tasks: PathBuf,
    pool: PathBuf,
    policy: String,
    attempts: Option<u32>,
    seed: u64,
    out: PathBuf,
    grouping: Option<PathBuf>,
}

fn curriculum(probes: &Path, out: &Path, retries: Option<&Path>, augment: Option<&Path>) -> Result<()> {
    let probes: Vec<ProbeResult> = read_jsonl(probes)?;
    let mut manifest = probe_split(&probes)?;
    let rl_before = manifest.rl.len();
    if let Some(path) = retries {
        let rows: Vec<RetryResult> = read_jsonl(path)?;
        manifest = cascade_promote(&manifest, &rows)?;
    }
    if let Some(path) = augment {
        let rows: Vec<AugmentationRollout> = read_jsonl(path)?;
        manifest = record_augmentation(&manifest, &rows)?;
    }
    manifest.check_partition()?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    let mut passes: BTreeMap<String, usize> = BTreeMap::new();
    for e in &manifest.sft {
        let pass = serde_json::to_value(e.distillation_pass)?;
        *passes.entry(pass.as_str().unwrap_or_default().to_string()).or_default() += 1;
    }
    println!(
        "sft rows {} {:?}, rl {} (was {}), discarded {}",
        manifest.sft.len(),
        passes,
        manifest.rl.len(),
        rl_before,
        manifest.discarded.len()
    );
    Ok(())
}

async fn dispatch(cli: Cli) -> Result<bool> {
    let cfg = match &cli.config {
        Some(path) => OrchestraConfig::load(path)?,
        None => OrchestraConfig::default(),
    };
    match cli.command {
        Command::Validate { path, pool, classify } => return validate(&path, pool.as_deref(), classify),
        Command::Run {
            tasks,
            pool,
            policy,
            attempts,
            seed,
            out,
            grouping,
        } => {
            run(
                &cfg,
                RunArgs {
                    tasks,
                    pool,
                    policy,
                    attempts,
                    seed,
                    out,
                    grouping,
                },
            )
            .await?
        }
        Command::Reward { episodes, alpha } => {
            let logs = read_episode_logs(&episodes)?;
            let reports = rewards_from_logs(&logs);
            let alpha = alpha.unwrap_or(cfg.reward.alpha);
            for rep in recompute_rewards(&reports, cfg.normalizer, alpha)? {
                println!("{}", serde_json::to_string(&rep)?);
            }
        }
        Command::Advantage {
            group,
            estimator,
            gamma,
        } => {
            let group: RolloutGroup = serde_json::from_str(&read(&group)?).context("parsing rollout group")?;
            let mut credit = cfg.rl.credit;
            if let Some(g) = gamma {
                credit.gamma = g;
            }
            let table = compute_advantages(estimator.into(), &group, &credit)?;
            println!("{}", serde_json::to_string_pretty(&table)?);
        }
        Command::Curriculum {
            probes,
            out,
            retries,
            augment,
        } => curriculum(&probes, &out, retries.as_deref(), augment.as_deref())?,
        Command::Report { logs, grouping } => {
            let grouping = grouping.as_deref().map(Grouping::load).transpose()?;
            let board = report_from_logs(&logs, grouping.as_ref(), cfg.harness.pass1_mean_over_attempts)?;
            println!("{}", serde_json::to_string_pretty(&board)?);
        }
    }
    Ok(true)
}

#[tokio::main]
async fn main() -> ExitCode {
    match dispatch(Cli::parse()).await {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

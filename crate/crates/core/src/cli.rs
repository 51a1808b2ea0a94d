//! Command-line entry points.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::config::{env_overrides, load_config, ConfigError, RunConfig};
use crate::memory::MemoryStore;
use crate::metrics::replay_metrics;
use crate::model::load_dataset;
use crate::trainer::{TrainError, Trainer};

#[derive(Debug, Parser)]
#[command(name = "marl-evo", version, about = "Joint-evolution training for hierarchical multi-agent systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Task file (one JSON record per line); overrides the configured dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write metrics, checkpoints and a summary.
    Train(RunArgs),
    /// Evaluate fresh or checkpointed policies.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint directory to restore before evaluating.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print a memory store, highest score first.
    MemoryInspect {
        /// Store file (one entry per line).
        store: PathBuf,
    },
    /// Recompute the run summary from a metrics stream.
    ReplayMetrics {
        /// Metrics stream file.
        metrics: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("output error: {0}")]
    Output(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("training error: {0}")]
    Train(#[from] TrainError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Train(TrainError::Config(_)) => 2,
            CliError::Output(_) | CliError::Input(_) => 3,
            CliError::Train(_) => 4,
        }
    }
}

fn resolve_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::from_toml_with("", env_overrides())?,
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dataset) = &args.dataset {
        cfg.train_dataset = Some(dataset.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    let occupied = dir.is_dir() && std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(CliError::Output(format!("{} is not empty (use --force to overwrite)", dir.display())));
        }
        for name in ["metrics.jsonl", "summary.json", "eval.json", "checkpoints", "batches"] {
            let p = dir.join(name);
            let removed = if p.is_dir() { std::fs::remove_dir_all(&p) } else if p.exists() { std::fs::remove_file(&p) } else { Ok(()) };
            removed.map_err(|e| CliError::Output(format!("{}: {e}", p.display())))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))
}

fn print_json<T: serde::Serialize>(value: &T) {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let _ = writeln!(std::io::stdout(), "{text}");
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            let cfg = resolve_config(&args)?;
            let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
            prepare_out(&out, args.force)?;
            let mut trainer = Trainer::new(cfg)?;
            let (train, eval) = trainer.datasets()?;
            let summary = trainer.train(&train, &eval, Some(&out))?;
            print_json(&summary);
        }
        Command::Eval { run, checkpoint } => {
            let cfg = resolve_config(&run)?;
            let mut trainer = Trainer::new(cfg)?;
            if let Some(dir) = &checkpoint {
                let (cursor, memory) = load_checkpoint(dir, &mut trainer.agents).map_err(TrainError::from)?;
                trainer.step = cursor.step;
                trainer.clock = cursor.clock;
                trainer.memory.extend(memory);
            }
            let tasks = match &run.dataset {
                Some(p) => load_dataset(p).map_err(|e| CliError::Input(e.to_string()))?,
                None => trainer.datasets()?.1,
            };
            let report = trainer.evaluate(&tasks);
            if let Some(out) = &run.out {
                prepare_out(out, run.force)?;
                let text = serde_json::to_string_pretty(&report).expect("serializable");
                std::fs::write(out.join("eval.json"), text).map_err(|e| CliError::Output(e.to_string()))?;
            }
            print_json(&report);
        }
        Command::MemoryInspect { store } => {
            let store = MemoryStore::load(&store).map_err(|e| CliError::Input(e.to_string()))?;
            let mut entries = store.entries().to_vec();
            entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
            let mut out = std::io::stdout().lock();
            for e in entries {
                let _ = writeln!(
                    out,
                    "#{:<5} score {:>10.4}  time {:>6}  plan [{}]\n       query:  {}\n       answer: {}",
                    e.id,
                    e.score,
                    e.time,
                    e.plan.join(", "),
                    e.query,
                    e.answer
                );
            }
        }
        Command::ReplayMetrics { metrics } => {
            let summary = replay_metrics(&metrics).map_err(|e| CliError::Input(e.to_string()))?;
            print_json(&summary);
        }
    }
    Ok(())
}

/// Parses `argv` and runs the command; returns the process exit status.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

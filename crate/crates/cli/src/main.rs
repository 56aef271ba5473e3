//! `dbmm`: generate environments and traces, infer transition and reward
//! machines, check them and train an agent on top of them.
//!
//! Exit codes: 0 ok, 2 bad input data, 3 verification failure, 4 internal
//! error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::commands::Paths;
use crate::config::{parse_label_set, EnvSource, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("data error: {0}")]
    Data(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Data(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dbmm", version, about = "Infer transition and reward machines from POMDP traces")]
struct Cli {
    /// JSON run configuration shared by all subcommands.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// A trivial β-input as comma-separated propositions; "" is the empty
    /// label. Repeatable; replaces the configured list.
    #[arg(long = "trivial-beta", global = true, allow_hyphen_values = true)]
    trivial_beta: Vec<String>,
    /// Worker threads for trace generation and supplementing.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EnvKind {
    Fig1,
    PhaseGrid,
    Random,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an environment spec to <out>/env.json.
    GenEnv {
        /// Overrides the configured environment.
        #[arg(long, value_enum)]
        kind: Option<EnvKind>,
        #[arg(long, default_value_t = 5)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        phases: usize,
    },
    /// Sample random-agent traces into <out>/traces.jsonl.
    GenTraces {
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Infer both machines; writes tm.json, rm.json and manifest.json.
    Infer {
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Check resolvence against the environment and replay the corpus.
    Verify {
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        tm: Option<PathBuf>,
        #[arg(long)]
        rm: Option<PathBuf>,
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Q-learning over (observation, RM state, TM state).
    Train {
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        tm: Option<PathBuf>,
        #[arg(long)]
        rm: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Graphviz renderings of both machines.
    ExportDot {
        #[arg(long)]
        tm: Option<PathBuf>,
        #[arg(long)]
        rm: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    if !cli.trivial_beta.is_empty() {
        cfg.pipeline.trivial_betas = cli.trivial_beta.iter().map(|s| parse_label_set(s)).collect();
    }
    let mut paths = Paths {
        out: cfg.out_dir(),
        env: None,
        traces: None,
        tm: None,
        rm: None,
    };
    match &cli.command {
        Command::GenEnv { kind, size, phases } => {
            if let Some(kind) = kind {
                cfg.env = match kind {
                    EnvKind::Fig1 => EnvSource::Fig1,
                    EnvKind::PhaseGrid => EnvSource::PhaseGrid {
                        size: *size,
                        phases: *phases,
                    },
                    EnvKind::Random => EnvSource::Random(Default::default()),
                };
            }
        }
        Command::GenTraces { env, count, max_len } => {
            paths.env = env.clone();
            cfg.traces.count = count.unwrap_or(cfg.traces.count);
            cfg.traces.max_len = max_len.unwrap_or(cfg.traces.max_len);
        }
        Command::Infer { traces } => paths.traces = traces.clone(),
        Command::Verify {
            env,
            tm,
            rm,
            traces,
            depth,
        } => {
            (paths.env, paths.tm, paths.rm, paths.traces) = (env.clone(), tm.clone(), rm.clone(), traces.clone());
            cfg.verify.depth = depth.unwrap_or(cfg.verify.depth);
        }
        Command::Train { env, tm, rm, episodes } => {
            (paths.env, paths.tm, paths.rm) = (env.clone(), tm.clone(), rm.clone());
            cfg.qlearning.episodes = episodes.unwrap_or(cfg.qlearning.episodes);
        }
        Command::ExportDot { tm, rm } => (paths.tm, paths.rm) = (tm.clone(), rm.clone()),
    }
    cfg.validate()?;
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    match cli.command {
        Command::GenEnv { .. } => commands::gen_env(&cfg, &paths),
        Command::GenTraces { .. } => commands::gen_traces(&cfg, &paths),
        Command::Infer { .. } => commands::infer(&cfg, &paths),
        Command::Verify { .. } => commands::verify(&cfg, &paths),
        Command::Train { .. } => commands::train_agent(&cfg, &paths),
        Command::ExportDot { .. } => commands::export_dot(&paths),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dbmm: {e}");
            ExitCode::from(e.code())
        }
    }
}

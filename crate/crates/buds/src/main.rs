use std::path::PathBuf;
use std::process::ExitCode;

use buds::{run_stage, BudsError, PipelineConfig, Stage};
use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    GenDemos,
    Repr,
    Segment,
    Cluster,
    TrainSkills,
    TrainMeta,
    Rollout,
    Eval,
    All,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Stage {
        match c {
            Command::GenDemos => Stage::GenDemos,
            Command::Repr => Stage::Repr,
            Command::Segment => Stage::Segment,
            Command::Cluster => Stage::Cluster,
            Command::TrainSkills => Stage::TrainSkills,
            Command::TrainMeta => Stage::TrainMeta,
            Command::Rollout => Stage::Rollout,
            Command::Eval => Stage::Eval,
            Command::All => Stage::All,
        }
    }
}

/// Bottom-up skill discovery pipeline.
#[derive(Debug, Parser)]
#[command(name = "buds", version)]
struct Cli {
    /// Stage to run; `all` chains every stage.
    #[arg(value_enum)]
    stage: Command,
    /// Pipeline config (JSON with a `preset` field).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for rollouts; 1 gives bitwise-reproducible runs.
    #[arg(long)]
    threads: Option<usize>,
    /// Run a single replicate with this seed instead of `eval.seeds`.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<(), BudsError> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.eval.seeds = vec![seed];
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(BudsError::config("--threads", "must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| BudsError::config("--threads", e.to_string()))?;
    }
    run_stage(cli.stage.into(), &cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

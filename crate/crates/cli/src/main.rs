use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use erl2_core::config::RunConfig;
use erl2_core::harness;

#[derive(Parser)]
#[command(
    name = "erl2",
    version,
    about = "Evolutionary RL with a shared state encoder and linear policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory in the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the champion policy stored in a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every cell of one ablation axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
    },
}

fn load(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let s = harness::train(&cfg)?;
            println!(
                "steps {} generations {} champion return {:.3} ({:.1}s) -> {}",
                s.total_steps,
                s.generations,
                s.final_champion_eval_return,
                s.wallclock_s,
                s.out_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let r = harness::evaluate_checkpoint(&checkpoint, episodes, seed)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Command::Ablate { config, axis } => {
            let cfg = load(&config)?;
            for (name, s) in harness::ablate(&cfg, &axis)? {
                println!(
                    "{name}: steps {} champion return {:.3}",
                    s.total_steps, s.final_champion_eval_return
                );
            }
        }
    }
    Ok(())
}

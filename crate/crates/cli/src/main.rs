use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use nfa_core::harness::config::ExperimentConfig;
use nfa_core::harness::experiment::{output_dir, prepare, run_experiment, run_oracle, run_pretrain};
use nfa_core::harness::report::{compare_decisions, import_architecture};

#[derive(Parser)]
#[command(name = "nfa", version, about = "Search frozen / fine-tune / adapter schemes for cascaded models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, search, and export the chosen architecture.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; otherwise the configured one, placed under
        /// $NFA_OUTPUT_ROOT when relative.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every discrete scheme with a fixed budget and rank them.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two exported architecture files cell by cell.
    Compare {
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        runs: Vec<PathBuf>,
    },
    /// Pretrain the upstream stages only.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: &Path, seed: Option<u64>) -> Result<(ExperimentConfig, u64)> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let seed = seed.unwrap_or(cfg.seed);
    Ok((cfg, seed))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let (cfg, seed) = load(&config, seed)?;
            let dir = output_dir(&cfg, out.as_deref(), seed);
            let (outcome, files) = run_experiment(&cfg, seed, &dir)?;
            let t = outcome.decision.totals;
            println!("choices: {}", outcome.decision.choices().join(" "));
            println!(
                "total_params {} train_params {} selected_params {}",
                t.total_params, t.train_params, t.selected_params
            );
            println!("final val_loss {:.6}", outcome.final_val_loss);
            println!("architecture: {}", files.architecture.display());
            println!("metrics: {}", files.metrics.display());
        }
        Command::Oracle { config, seed, out } => {
            let (cfg, seed) = load(&config, seed)?;
            let prepared = prepare(&cfg, seed)?;
            let ranking = run_oracle(&cfg, &prepared, seed)?;
            let dir = output_dir(&cfg, out.as_deref(), seed);
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("oracle.json");
            std::fs::write(&path, serde_json::to_string_pretty(&ranking)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            for (rank, e) in ranking.iter().enumerate() {
                println!("{:>4}  {:.6}  {}", rank + 1, e.val_loss, e.choices.join(" "));
            }
            println!("oracle: {}", path.display());
        }
        Command::Compare { runs } => {
            let a = import_architecture(&runs[0]).with_context(|| format!("reading {}", runs[0].display()))?;
            let b = import_architecture(&runs[1]).with_context(|| format!("reading {}", runs[1].display()))?;
            println!("{}", compare_decisions(&a, &b)?);
        }
        Command::Pretrain { config, seed, out } => {
            let (cfg, seed) = load(&config, seed)?;
            let dir = output_dir(&cfg, out.as_deref(), seed);
            for r in run_pretrain(&cfg, seed, &dir)? {
                println!("stage {}: loss {:.6} -> {:.6}", r.stage, r.loss_before, r.loss_after);
            }
            println!("checkpoints: {}", dir.join("checkpoints").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Thin command-line front end over the library's experiment runner.
//!
//! Exit code 0 on success; on failure, a single machine-parseable line of
//! the form `error[<class>]: <message>` on stderr and a nonzero exit code.

use clap::{Args, Parser, Subcommand};
use fedsim::error::Error;
use fedsim::federation::{AggregationMode, SelectionStrategy};
use fedsim::loss::LossKind;
use fedsim::runner::{
    cmd_compare, cmd_explain, cmd_generate_data, cmd_train, ExperimentConfig,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fedsim",
    about = "Federated learning simulator: encrypted weighted aggregation, \
             performance-based client selection, and model explanations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each one overrides the config file.
#[derive(Args)]
struct Common {
    /// Path to the experiment config (TOML). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,

    /// Run name override (names the output subdirectory).
    #[arg(long)]
    run_name: Option<String>,

    /// Output directory override.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainFlags {
    /// Communication rounds override.
    #[arg(long)]
    rounds: Option<usize>,

    /// Client selection strategy override (pbcs | random).
    #[arg(long)]
    strategy: Option<SelectionStrategy>,

    /// Aggregation mode override (plaintext | encrypted).
    #[arg(long)]
    mode: Option<AggregationMode>,

    /// Loss kind override (weighted-nll | cross-entropy | focal).
    #[arg(long)]
    loss: Option<LossKind>,

    /// Local epochs override.
    #[arg(long)]
    local_epochs: Option<usize>,

    /// Learning rate override.
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic client datasets and the shared test set as CSVs.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Run federated training: round log, best checkpoint, summary.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Run the 3x3 federation-arm x loss grid on one shared dataset.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Emit per-class attribution reports and attention matrices for a
    /// trained checkpoint.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Path to a checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(name) = &common.run_name {
        config.run_name = name.clone();
    }
    if let Some(dir) = &common.output_dir {
        config.output_dir = dir.clone();
    }
    config.resolve();
    config.validate()?;
    Ok(config)
}

fn apply_train_flags(config: &mut ExperimentConfig, flags: &TrainFlags) {
    if let Some(rounds) = flags.rounds {
        config.federation.rounds = rounds;
    }
    if let Some(strategy) = flags.strategy {
        config.federation.selection_strategy = strategy;
    }
    if let Some(mode) = flags.mode {
        config.federation.aggregation_mode = mode;
    }
    if let Some(kind) = flags.loss {
        config.loss.kind = kind;
    }
    if let Some(epochs) = flags.local_epochs {
        config.federation.local_epochs = epochs;
    }
    if let Some(lr) = flags.learning_rate {
        config.federation.learning_rate = lr;
    }
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::GenerateData { common } => {
            let config = load_config(&common)?;
            let out = cmd_generate_data(&config)?;
            println!(
                "wrote {} client files and {} under {}",
                out.client_files.len(),
                out.test_file.display(),
                out.dir.display()
            );
        }
        Command::Train { common, flags } => {
            let mut config = load_config(&common)?;
            apply_train_flags(&mut config, &flags);
            config.validate()?;
            let out = cmd_train(&config)?;
            let s = &out.summary;
            println!(
                "run {} finished: best recall {:.4}, precision {:.4}, F1 {:.4} (round {})",
                out.run_dir.display(),
                s.best_recall,
                s.best_precision,
                s.best_f1,
                s.best_round.map_or("none".into(), |r| r.to_string()),
            );
        }
        Command::Compare { common, flags } => {
            let mut config = load_config(&common)?;
            apply_train_flags(&mut config, &flags);
            config.validate()?;
            let out = cmd_compare(&config)?;
            println!(
                "comparison grid with {} cells written to {}",
                out.table.len(),
                out.run_dir.join("comparison.csv").display()
            );
            for row in &out.table {
                println!(
                    "  {:>16} {:>13}: recall {:.4} precision {:.4} F1 {:.4} round {}",
                    row.federation_label,
                    row.loss.to_string(),
                    row.best_recall,
                    row.best_precision,
                    row.best_f1,
                    row.best_round.map_or("none".into(), |r| r.to_string()),
                );
            }
        }
        Command::Explain { common, checkpoint } => {
            let config = load_config(&common)?;
            let out = cmd_explain(&config, &checkpoint)?;
            println!(
                "wrote {} attribution reports and {} attention matrices under {}",
                out.attribution_files.len(),
                out.attention_files.len(),
                out.dir.display()
            );
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error[{}]: {e}", e.class());
        std::process::exit(1);
    }
}

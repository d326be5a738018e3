//! `vdpcr`: generate toy corpora, run the training phases, analyze heads,
//! and evaluate or ensemble checkpoints.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vdpcr_core::pruning::PruneRule;

mod commands;
mod config;
mod error;
mod manifest;

#[derive(Debug, Parser)]
#[command(
    name = "vdpcr",
    version,
    about = "Coreference-aware visual dialog training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML configuration with [synthetic], [model], [phase0], [phase1] and [phase2] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides a configuration entry, e.g. `--set phase1.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for data generation, initialization and training order
    /// (overrides the per-phase seeds).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Print metrics as JSON on stdout.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic corpus with gold coreference and answer labels.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        /// Training dialogs.
        #[arg(long)]
        n: usize,
        /// Validation dialogs.
        #[arg(long, default_value_t = 0)]
        val: usize,
        /// Test dialogs.
        #[arg(long, default_value_t = 0)]
        test: usize,
        /// Fraction of training dialogs moved, without labels, to unlabeled.jsonl.
        #[arg(long, default_value_t = 0.0)]
        unlabeled_fraction: f64,
    },
    /// Trains the coreference model on labeled dialogs.
    TrainPhase0 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
    },
    /// Labels unlabeled dialogs with a teacher and retrains on the union.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        val: PathBuf,
    },
    /// Ranks attention heads by how much more they attend within coreference clusters.
    AnalyzeHeads {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Also write the attention maps and mention positions.
        #[arg(long)]
        dump: bool,
    },
    /// Joint answer-ranking, masked-token and coreference training.
    TrainPhase1 {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to start from.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// heads.json from analyze-heads; required when phase1.pcr_mode = "selected_heads".
        #[arg(long)]
        heads: Option<PathBuf>,
    },
    /// Writes the history rounds each pruning rule keeps.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "crf+cap")]
        rule: PruneRule,
    },
    /// Finetunes answer ranking on dense relevance scores.
    TrainPhase2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
    },
    /// Ranking and coreference metrics of a checkpoint on a corpus.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "all")]
        rule: PruneRule,
    },
    /// Averages the normalized answer scores of several checkpoints.
    Ensemble {
        #[command(flatten)]
        common: Common,
        /// Member checkpoint. Repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "all")]
        rule: PruneRule,
    },
    /// Writes the corpus with predicted antecedents as pseudo labels.
    Resolve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `stylepo`: data generation, training, policy optimization, inference and
//! evaluation for style transfer, with per-run manifests.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] stylepo::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for data problems, 4 for training failures.
    pub fn exit_code(&self) -> u8 {
        use stylepo::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::Config(_) | E::UnknownStyle(_)) => 2,
            CliError::Core(E::Diverged { .. } | E::NonFinite(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stylepo", version, about = "Style transfer with supervised tuning and policy optimization")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to `$STYLEPO_RUN_DIR/<command>` or `runs/<command>`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    SftParaphrase,
    SftTransfer,
    RewardClassifier,
    RewardEmbedder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgoArg {
    Ppo,
    Dpo,
    Cpo,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic styled corpus.
    GenCorpus,
    /// Build paraphrase pairs and pseudo-parallel transfer data from a corpus.
    BuildData {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train one model.
    Train {
        #[arg(value_enum)]
        stage: Stage,
        /// Paraphrase pairs or transfer examples (SFT stages).
        #[arg(long, required_if_eq_any = [("stage", "sft-paraphrase"), ("stage", "sft-transfer")])]
        data: Option<PathBuf>,
        /// Labeled corpus (reward stages).
        #[arg(long, required_if_eq_any = [("stage", "reward-classifier"), ("stage", "reward-embedder")])]
        corpus: Option<PathBuf>,
    },
    /// Optimize a transfer model against a reward model.
    TrainPo {
        #[arg(long, value_enum)]
        algo: AlgoArg,
        /// Transfer model checkpoint; also the frozen reference.
        #[arg(long)]
        sft: PathBuf,
        #[arg(long)]
        reward: PathBuf,
        /// Transfer examples the prompts are built from.
        #[arg(long)]
        data: PathBuf,
    },
    /// Paraphrase then transfer each input text.
    Transfer {
        /// JSON Lines with `text`, `style` and optionally `id` and `split`.
        #[arg(long)]
        input: PathBuf,
        /// Only inputs in this split (train, val or test).
        #[arg(long)]
        split: Option<String>,
        /// Learned paraphraser for the first hop.
        #[arg(long, required_unless_present = "rule_neutralizer")]
        paraphraser: Option<PathBuf>,
        /// Use the rule-based neutralizer instead of a learned paraphraser.
        #[arg(long, conflicts_with = "paraphraser")]
        rule_neutralizer: bool,
        #[arg(long)]
        model: PathBuf,
        /// Target style for every input; otherwise each input moves to the next style.
        #[arg(long)]
        target: Option<String>,
        /// JSON array of target exemplar texts (individual mode).
        #[arg(long)]
        exemplars: Option<PathBuf>,
        /// Corpus to draw target exemplars from (individual mode).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Score transfer records.
    Eval {
        #[arg(long)]
        records: PathBuf,
        /// Classifier (community) or embedder (individual) checkpoint.
        #[arg(long)]
        reward: PathBuf,
        /// Corpus whose validation split supplies target style texts (individual mode).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Style definitions for oracle confusion.
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Records of a baseline system for paired significance tests.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::BuildData { .. } => "build-data",
            Command::Train { .. } => "train",
            Command::TrainPo { .. } => "train-po",
            Command::Transfer { .. } => "transfer",
            Command::Eval { .. } => "eval",
        }
    }
}

fn main() -> ExitCode {
    manifest::init_logging();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

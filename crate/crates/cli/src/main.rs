mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SELFHAR_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "selfhar",
    version,
    about = "Multi-task self-supervised learning for accelerometer windows"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory. Defaults to `$SELFHAR_OUT/<command>` or `runs/<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent runs (results do not depend on it).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Window, split and normalize a labeled CSV recording file.
    Prepare(commands::PrepareArgs),
    /// Generate the synthetic dataset, split and normalize it.
    Synth(commands::SynthArgs),
    /// Pretrain a transformation prediction network.
    Pretrain(commands::PretrainArgs),
    /// Pretrain the convolutional autoencoder baseline.
    PretrainAe(commands::PretrainAeArgs),
    /// Train one activity classifier.
    Train(commands::TrainArgs),
    /// Frozen, fine-tuned, random-init and scratch comparison.
    EvalFrozen(commands::EvalFrozenArgs),
    /// Label-budget evaluation.
    EvalSemi(commands::EvalSemiArgs),
    /// User-split k-fold cross-validation.
    EvalCv(commands::EvalCvArgs),
    /// Frozen probes on each trunk block.
    EvalLayers(commands::EvalLayersArgs),
    /// Single-task versus multi-task pretraining.
    EvalTasks(commands::EvalTasksArgs),
    /// Transfer a pretrained trunk to another dataset.
    Transfer(commands::TransferArgs),
    /// Layer-by-layer SVCCA grid between two models.
    AnalyzeSvcca(commands::SvccaArgs),
    /// Input-gradient saliency maps.
    AnalyzeSaliency(commands::SaliencyArgs),
    /// Pooled trunk features as CSV.
    ExportEmbeddings(commands::EmbeddingArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prepare(_) => "prepare",
            Command::Synth(_) => "synth",
            Command::Pretrain(_) => "pretrain",
            Command::PretrainAe(_) => "pretrain-ae",
            Command::Train(_) => "train",
            Command::EvalFrozen(_) => "eval-frozen",
            Command::EvalSemi(_) => "eval-semi",
            Command::EvalCv(_) => "eval-cv",
            Command::EvalLayers(_) => "eval-layers",
            Command::EvalTasks(_) => "eval-tasks",
            Command::Transfer(_) => "transfer",
            Command::AnalyzeSvcca(_) => "analyze-svcca",
            Command::AnalyzeSaliency(_) => "analyze-saliency",
            Command::ExportEmbeddings(_) => "export-embeddings",
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(1)
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    e.chain()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(": ")
        .replace('\n', " ")
}

//! `ust`: data synthesis, training, translation, evaluation, retrieval and
//! the ablation matrix from the command line.
//!
//! Settings resolve in three layers: built-in defaults, then the
//! `--config` file, then command-line flags.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage error. Failures
//! print one line `error: <kind>: <message>` to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ust", about = "Unpaired shape transfer between catalog and in-context images", disable_version_flag = true)]
pub struct Cli {
    /// `key = value` configuration file (sections trainer, weights, model, data).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of every stochastic step (overrides trainer.seed and data.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dataset directory holding `manifest.txt`.
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    /// Output directory; every file a command writes goes here.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the version and the checkpoint format version it writes.
    #[arg(long)]
    pub version: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural two-domain dataset.
    SynthData(SynthArgs),
    /// Train a model on the training split.
    Train(TrainArgs),
    /// Translate one image with a trained model.
    Translate(TranslateArgs),
    /// Score a model on the test split.
    Evaluate(EvaluateArgs),
    /// Rank catalog items for every query by style-code distance.
    Retrieve(RetrieveArgs),
    /// Coarse style-code retrieval reordered by perceptual distance.
    Rerank(RerankArgs),
    /// Train and evaluate every ablation variant.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_items: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Short-run learning rate and a 64-pixel narrow model.
    Desk,
    /// Reference learning rate and full-width model.
    Reference,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: Profile,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Continue from a training-state checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub no_perceptual_loss: bool,
    #[arg(long)]
    pub no_shared_style_encoder: bool,
    #[arg(long)]
    pub no_mask_attention: bool,
    #[arg(long)]
    pub no_fit_in: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    TakeOff,
    TryOn,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long, value_enum)]
    pub direction: Direction,
    /// Take-off: the in-context image. Try-on: the catalog image.
    #[arg(long)]
    pub input: PathBuf,
    /// Object mask of the in-context image (take-off) or the target region (try-on).
    #[arg(long)]
    pub mask: PathBuf,
    /// Person image the object is placed into; the masked region is removed.
    #[arg(long, required_if_eq("direction", "try-on"))]
    pub context: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Take the style code from this catalog image instead of the input.
    #[arg(long)]
    pub style_from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractorArgs {
    /// Stored feature extractor; a seeded random one is used otherwise.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
    #[arg(long, default_value_t = 1234)]
    pub extractor_seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QuerySplit {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split whose in-context images are the queries; the database is every catalog item.
    #[arg(long, value_enum, default_value = "test")]
    pub queries: QuerySplit,
    /// Recall cut-offs.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 20, 50])]
    pub ks: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[command(flatten)]
    pub retrieve: RetrieveArgs,
    /// Size of the coarse candidate set.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: usage: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Op(e)) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

//! The `fuse` command line: tokenizer training, adapter fitting, gradient
//! checks, prompt optimization, algebra self-tests and artifact inspection.

pub mod checks;
mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::run;

/// Overrides every seed taken from flags or config files.
pub const SEED_ENV: &str = "FUSE_SEED";

/// Outcome of a command that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// A check ran and did not meet its threshold.
    CheckFailed,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::CheckFailed => 1,
        }
    }
}

/// Exit code for usage and I/O errors.
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fuse", version, about = "Cross-tokenizer embedding adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenizer utilities.
    #[command(subcommand)]
    Tok(TokCommand),
    /// Fit the bucketed tensor maps between two models.
    Fit(FitArgs),
    /// Compare backward maps against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the discrete prompt search described by a config file.
    Optimize(OptimizeArgs),
    /// Randomized self-test of the t-product identities.
    Algebra(AlgebraArgs),
    /// Print a summary of any artifact file.
    Inspect(InspectArgs),
    /// Write the demo corpus, models, adapter and optimize config.
    Demo(DemoArgs),
}

#[derive(Debug, Subcommand)]
pub enum TokCommand {
    /// Train a tokenizer on a whitespace-separated corpus.
    Train(TokTrainArgs),
}

#[derive(Debug, Args)]
pub struct TokTrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Target number of base tokens (ignored with --char).
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Character tokenizer over the corpus alphabet instead of BPE.
    #[arg(long)]
    pub char: bool,
    /// Do not mark word-initial tokens.
    #[arg(long)]
    pub no_marker: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub tok_i: PathBuf,
    #[arg(long)]
    pub tok_j: PathBuf,
    /// Vocabulary matrix of model i (a single-tube tensor file).
    #[arg(long)]
    pub emb_i: PathBuf,
    #[arg(long)]
    pub emb_j: PathBuf,
    /// Model ids recorded in the adapter; default to the embedding file stems.
    #[arg(long)]
    pub id_i: Option<String>,
    #[arg(long)]
    pub id_j: Option<String>,
    #[arg(long, default_value_t = fuse_core::vocab::DEFAULT_L_MAX)]
    pub lmax: usize,
    /// Words sampled per bucket.
    #[arg(long, default_value_t = fuse_core::vocab::DEFAULT_SAMPLE_CAP)]
    pub sample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    #[default]
    Transposed,
    /// Untransposed product; a negative control that should fail.
    Literal,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Use the built-in exact-regime toy pair instead of model bundles.
    #[arg(long, conflicts_with_all = ["model_i", "model_j", "adapter", "corpus"])]
    pub toy: bool,
    #[arg(long, requires = "model_j")]
    pub model_i: Option<PathBuf>,
    #[arg(long, requires = "model_i")]
    pub model_j: Option<PathBuf>,
    /// Tensor adapter between the models; without it the models must share
    /// a tokenizer and the matrix map is checked.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Corpus the prompts are drawn from.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 25)]
    pub prompts: usize,
    /// Words per corpus prompt.
    #[arg(long, default_value_t = 6)]
    pub words: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = OrderArg::Transposed)]
    pub order: OrderArg,
    /// Feed zero gradients and report the outputs instead.
    #[arg(long)]
    pub zero_grad: bool,
    /// Toy embedding widths.
    #[arg(long, default_value_t = 16)]
    pub dim_i: usize,
    #[arg(long, default_value_t = 24)]
    pub dim_j: usize,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlgebraArgs {
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// `seed`, unless `FUSE_SEED` is set.
pub fn effective_seed(seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(std::env::VarError::NotPresent) => Ok(seed),
        Err(e) => Err(e).context(SEED_ENV),
    }
}

//! Command-line workflows for TD-PCFG grammar induction: train, parse,
//! evaluate, sweep the number of preterminals, benchmark inside-algorithm
//! scaling, inspect learned nonterminals and write synthetic treebanks.
//!
//! Every command writes into a run directory named by the digest of its
//! [`manifest::RunManifest`].

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod bench;
pub mod commands;
pub mod config;
pub mod data;
mod error;
pub mod manifest;

pub use error::{CliError, Result};
pub use manifest::RunOutput;

#[derive(Debug, Parser)]
#[command(name = "tdpcfg", version = manifest::code_version(), about = "Tensor-decomposed PCFG induction")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed and keep each seed's best-dev-perplexity checkpoint.
    Train(TrainArgs),
    /// MBR-parse sentences with a checkpoint.
    Parse(ParseArgs),
    /// Score predictions (or a baseline) against a gold treebank.
    Eval(EvalArgs),
    /// Train and evaluate for each number of preterminals, with n = p / 2.
    Sweep(SweepArgs),
    /// Time the dense and factored inside algorithms against grammar size.
    Bench(BenchArgs),
    /// Gold-label correspondence and phrase clusters of learned nonterminals.
    Inspect(InspectArgs),
    /// Write the train/dev/test treebanks sampled from the `[synthetic]` grammar.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["input", "treebank"]))]
pub struct ParseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// One whitespace-tokenized sentence per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Parse the (preprocessed) sentences of a bracketed treebank.
    #[arg(long)]
    pub treebank: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Left,
    Right,
    Random,
}

#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("predictor").required(true).args(["pred", "baseline"]))]
pub struct EvalArgs {
    #[arg(long)]
    pub gold: PathBuf,
    /// Prediction files, one per seed.
    #[arg(long, num_args = 1..)]
    pub pred: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Seeds of the random baseline.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    pub seeds: Vec<u64>,
    /// `exclude` or `score`.
    #[arg(long, default_value = "exclude")]
    pub empty_gold: String,
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Preterminal counts.
    #[arg(long, value_delimiter = ',', required = true)]
    pub p: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub dense_m: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
    pub factored_m: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub len: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub treebank: PathBuf,
    /// Predicted nonterminals shown in the matrix.
    #[arg(long, default_value_t = 30)]
    pub top_k: usize,
    /// Phrases listed per nonterminal.
    #[arg(long, default_value_t = 10)]
    pub cluster_size: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
}

/// Runs a parsed command line in a pool of `cli.threads` workers.
pub fn run(cli: &Cli) -> Result<RunOutput> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build()?;
    pool.install(|| {
        let root = cli.out_root.as_path();
        match &cli.command {
            Command::Train(a) => commands::train(a, root),
            Command::Parse(a) => commands::parse(a, root),
            Command::Eval(a) => commands::eval(a, root),
            Command::Sweep(a) => commands::sweep(a, root),
            Command::Bench(a) => commands::bench(a, root),
            Command::Inspect(a) => commands::inspect(a, root),
            Command::Synth(a) => commands::synth(a, root),
        }
    })
}

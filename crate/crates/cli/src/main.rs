//! `rnng`: train, parse, score and benchmark batched RNNGs from the shell.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! or search failure. Diagnostics go to standard error; every command
//! that writes artifacts also writes `config.json` with the resolved run.

mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rnng_core::beam::BeamConfig;
use rnng_core::Error;
use serde::Serialize;

#[derive(Parser, Debug, Serialize)]
#[command(name = "rnng", version, about = "Batched recurrent neural network grammars")]
pub struct Cli {
    /// Seed for initialisation, shuffling and synthetic data.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Floating-point width of the computation.
    #[arg(long, global = true, default_value_t = 32, value_parser = parse_precision)]
    pub precision: u32,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_precision(s: &str) -> Result<u32, String> {
    match s {
        "32" => Ok(32),
        "64" => Ok(64),
        _ => Err(format!("expected 32 or 64, got {s}")),
    }
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Train on a treebank, keeping the checkpoint with the best dev NLL.
    Train(TrainArgs),
    /// Beam-parse sentences; scores against gold trees when given trees.
    Parse(ParseArgs),
    /// Token-level perplexity from beam prefix probabilities.
    Ppl(ParseArgs),
    /// Minimal-pair accuracy on critical regions.
    PairsEval(PairsArgs),
    /// Oracle action sequences and stack depth bounds of a treebank.
    Oracle(OracleArgs),
    /// Training throughput per batch size.
    BenchTrain(BenchTrainArgs),
    /// Beam search time per sentence per beam and batch size.
    BenchBeam(BenchBeamArgs),
    /// Fast numerical self-checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Training treebank, one bracketed tree per line.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Optional held-out treebank scored with the best checkpoint.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Model size preset; `--dim` overrides it with uniform widths.
    #[arg(long, default_value = "word-256")]
    pub preset: String,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Most frequent word types kept.
    #[arg(long, default_value_t = 50_000)]
    pub vocab_size: usize,
    /// Existing merge table to segment terminals with.
    #[arg(long, conflicts_with = "subword_units")]
    pub subword_merges: Option<PathBuf>,
    /// Learn a merge table of this many units from the training tokens.
    #[arg(long)]
    pub subword_units: Option<usize>,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 26_000)]
    pub max_actions: usize,
    #[arg(long, default_value_t = 4096)]
    pub bucket: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1000)]
    pub validate_every: usize,
    #[arg(long, default_value_t = 10)]
    pub max_epochs: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub max_hours: Option<f64>,
    /// Global gradient-norm ceiling.
    #[arg(long)]
    pub clip: Option<f64>,
}

#[derive(Args, Debug, Serialize, Clone)]
pub struct BeamArgs {
    #[arg(long, default_value_t = 100)]
    pub beam_k: usize,
    /// Word beam; defaults to k/10.
    #[arg(long)]
    pub beam_kw: Option<usize>,
    /// Fast-track size; defaults to k/100.
    #[arg(long)]
    pub beam_ks: Option<usize>,
    #[arg(long, default_value_t = 250)]
    pub token_cap: usize,
    #[arg(long, default_value_t = 100)]
    pub depth_bound: usize,
    /// Expansion rounds allowed between two words.
    #[arg(long, default_value_t = 40)]
    pub max_structural: usize,
    /// Sentences per beam batch, within the token cap.
    #[arg(long, default_value_t = 10)]
    pub beam_batch: usize,
}

impl BeamArgs {
    pub fn config(&self, k: usize) -> BeamConfig {
        let d = BeamConfig::with_schedule(k);
        BeamConfig {
            k,
            k_w: self.beam_kw.unwrap_or(d.k_w),
            k_s: self.beam_ks.unwrap_or(d.k_s),
            token_cap: self.token_cap,
            max_structural: self.max_structural,
            depth: self.depth_bound,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ParseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sentences, one per line: bracketed trees (used as gold) or
    /// whitespace-separated tokens.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub beam: BeamArgs,
    /// Report surprisal in bits instead of nats.
    #[arg(long)]
    pub bits: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct PairsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON-lines suite of minimal pairs.
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub beam: BeamArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct OracleArgs {
    #[arg(long)]
    pub trees: PathBuf,
    /// Also write `oracle.jsonl` and the config echo here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchTrainArgs {
    /// Benchmark treebank; a synthetic corpus when absent.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub synthetic: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    pub batch_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    /// Sentences processed per measurement.
    #[arg(long, default_value_t = 256)]
    pub sentences: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchBeamArgs {
    /// Model to search with; an untrained model of `--dim` when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Token lines or trees; synthetic sentences when absent.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub synthetic: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "10,50,100")]
    pub beam_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,10")]
    pub batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 250)]
    pub token_cap: usize,
    #[arg(long, default_value_t = 100)]
    pub depth_bound: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SelfcheckArgs {
    /// Also load this checkpoint and check it.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// A failed run, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Config(_) => Failure::Config(m),
            Error::Parse { .. }
            | Error::InvalidSequence { .. }
            | Error::Empty(_)
            | Error::Data(_)
            | Error::Checkpoint { .. }
            | Error::Io { .. } => Failure::Data(m),
            _ => Failure::Numeric(m),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

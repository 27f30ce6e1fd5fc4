//! `prefrec` — train and evaluate desk-scale preference-optimized
//! recommenders (SFT, DPO, SimPO, S-DPO, NAPO) on TSV datasets.
//!
//! Exit codes: 0 success, 1 usage problem, 2 data/artifact problem,
//! 3 numerical abort during training.

mod manifest;
mod ops;

use clap::{Args, Parser, Subcommand};
use prefrec_core::aux::AuxError;
use prefrec_core::checkpoint::CheckpointError;
use prefrec_core::data::DataError;
use prefrec_core::eval::EvalError;
use prefrec_core::policy::PolicyError;
use prefrec_core::trainer::TrainError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Data(String),
    Numeric(String),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    fn exit_code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Usage(m) | AppError::Data(m) | AppError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<CheckpointError> for AppError {
    fn from(e: CheckpointError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<PolicyError> for AppError {
    fn from(e: PolicyError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<AuxError> for AppError {
    fn from(e: AuxError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<EvalError> for AppError {
    fn from(e: EvalError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<prefrec_core::sharing::SharingError> for AppError {
    fn from(e: prefrec_core::sharing::SharingError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => AppError::Usage(e.to_string()),
            TrainError::NonFinite { .. } => AppError::Numeric(e.to_string()),
            other => AppError::Data(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "prefrec", version, about = "Preference-optimized sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory (five TSV files)
    GenData(GenDataArgs),
    /// Build a dataset directory from raw interactions + items TSVs
    Ingest(IngestArgs),
    /// Train the auxiliary similarity recommender
    TrainAux(TrainAuxArgs),
    /// Train the policy: SFT from scratch or a preference loss from an SFT checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint (HitRatio@1, ValidRatio, pop-bias)
    Eval(EvalArgs),
    /// Tabulate policy-call counts and a memory proxy across n_neg/rho sweeps
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 100)]
    pub users: usize,
    #[arg(long, default_value_t = 200)]
    pub items: usize,
    #[arg(long, default_value_t = 8)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 12)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub n_neg: usize,
    #[arg(long, default_value_t = 20)]
    pub candidate_size: usize,
    /// Emit one instance per (user, position) instead of one per user
    #[arg(long)]
    pub sliding_window: bool,
    #[arg(long, default_value_t = 2)]
    pub min_interactions: usize,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct IngestArgs {
    /// user <TAB> item <TAB> timestamp rows
    #[arg(long)]
    pub interactions: PathBuf,
    /// item_id <TAB> title rows
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub n_neg: usize,
    #[arg(long, default_value_t = 20)]
    pub candidate_size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub sliding_window: bool,
    #[arg(long, default_value_t = 2)]
    pub min_interactions: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainAuxArgs {
    /// Dataset directory (from gen-data or ingest)
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Run directory; receives manifest.json and aux.ckpt
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory (from gen-data or ingest)
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory; receives manifest.json, report.jsonl, policy.ckpt
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with TrainConfig keys; explicit flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["sft", "dpo", "simpo", "sdpo", "napo"])]
    pub loss: Option<String>,
    #[arg(long)]
    pub n_neg: Option<usize>,
    /// Share-partner fraction rho in [0, 1]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Base reward margin gamma_0
    #[arg(long)]
    pub gamma0: Option<f64>,
    /// Dynamic-margin sensitivity alpha (0 freezes the margin)
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Momentum of the confidence baseline R_0
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Length-normalize response scores inside NAPO
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub length_norm: Option<bool>,
    /// Gradient treatment of shared negatives
    #[arg(long, value_parser = ["flow", "detach"])]
    pub share_grad: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = ["sgd", "adam"])]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub candidate_size: Option<usize>,
    /// Starting point (and frozen reference) for preference losses
    #[arg(long)]
    pub sft_checkpoint: Option<PathBuf>,
    /// Auxiliary recommender for sharing partners and the dynamic margin
    #[arg(long)]
    pub aux_checkpoint: Option<PathBuf>,
    /// Embedding width for a fresh SFT policy
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Response layout for a fresh SFT policy (preference runs inherit the
    /// checkpoint's mode)
    #[arg(long, default_value = "single-token", value_parser = ["single-token", "multi-token"])]
    pub response_mode: String,
    #[arg(long, default_value = "f64", value_parser = ["f32", "f64"])]
    pub precision: String,
    /// Run a whole named grid of configurations instead of one run
    #[arg(long, value_parser = ["ablation"])]
    pub grid: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// SFT checkpoint to compare against (adds a relative-improvement block)
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    #[arg(long, default_value = "f64", value_parser = ["f32", "f64"])]
    pub precision: String,
    /// Run directory; receives manifest.json and eval.json
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Negatives-per-sequence sweep
    #[arg(long, value_delimiter = ',', default_value = "1,3,9,19")]
    pub n_neg: Vec<usize>,
    /// Share-fraction sweep
    #[arg(long, value_delimiter = ',', default_value = "0.0,0.7")]
    pub rho: Vec<f64>,
    /// Batches measured per sweep point
    #[arg(long, default_value_t = 2)]
    pub batches: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Run directory; receives manifest.json and bench.tsv
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> AppResult<()> {
    match &cli.command {
        Cmd::GenData(a) => ops::gen_data(a),
        Cmd::Ingest(a) => ops::ingest_cmd(a),
        Cmd::TrainAux(a) => ops::train_aux_cmd(a),
        Cmd::Train(a) => ops::train_cmd(a),
        Cmd::Eval(a) => ops::eval_cmd(a),
        Cmd::Bench(a) => ops::bench_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! `dlens`: decomposition, mask training, interventions and reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlens::DlensError;

mod commands;
mod manifest;

/// Exit status for invalid inputs or arguments.
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 1;

/// An input problem detected by the CLI itself.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

#[derive(Parser, Debug)]
#[command(
    name = "dlens",
    version,
    about = "Singular-direction analysis of GPT-2 style transformers"
)]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Decompose augmented QK/OV/MLP matrices into an SVD cache.
    Decompose(DecomposeArgs),
    /// Learn directional masks for a task.
    TrainMasks(TrainArgs),
    /// Apply scalar-swap interventions on OV directions.
    Intervene(InterveneArgs),
    /// Evaluate trained masks and compute direction statistics.
    Analyze(AnalyzeArgs),
    /// Render tables, JSON and SVG figures from an analysis run.
    Report(ReportArgs),
    /// Generate clean/corrupt prompt splits.
    GenData(GenDataArgs),
}

/// Model and data selection shared by several commands.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model directory (model.safetensors, vocab.json, merges.txt) or `toy:<seed>`.
    #[arg(long)]
    pub model: String,
}

#[derive(Args, Debug, Clone)]
pub struct CacheArgs {
    /// SVD cache directory (default: $DLENS_CACHE_DIR/<model id>/svd).
    #[arg(long)]
    pub svd_cache: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory holding train/val/test JSONL splits; generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed for generated splits.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Divide default split sizes by this factor when generating.
    #[arg(long, default_value_t = 1)]
    pub split_scale: usize,
}

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory (overrides the cache default).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated kinds: qk, ov, mlp_in, mlp_out.
    #[arg(long, value_delimiter = ',', default_value = "qk,ov,mlp_in,mlp_out")]
    pub kinds: Vec<String>,
    /// Relative singular-value cut-off.
    #[arg(long, default_value_t = dlens::decomposition::DEFAULT_RANK_TOL)]
    pub rank_tol: f32,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub cache: CacheArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// ioi, gt or gp.
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub l1_weight: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated kinds to mask.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<String>>,
    /// Use at most this many training prompts.
    #[arg(long)]
    pub max_train: Option<usize>,
    /// Use at most this many validation prompts.
    #[arg(long)]
    pub max_val: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InterveneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub cache: CacheArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Intervention spec JSON.
    #[arg(long)]
    pub spec: PathBuf,
    /// Split evaluated (train, val or test).
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Row label in the report.
    #[arg(long, default_value = "intervention")]
    pub experiment: String,
    /// Evaluate these scales instead of the spec's own.
    #[arg(long, value_delimiter = ',')]
    pub sigma_scales: Option<Vec<f64>>,
    #[arg(long)]
    pub max_prompts: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub cache: CacheArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub task: String,
    /// Directory holding masks.safetensors.
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_prompts: Option<usize>,
    /// QK directions to profile, as `<component key>:<k>` (e.g. qk_l9_h6:7).
    #[arg(long, value_delimiter = ',')]
    pub directions: Vec<String>,
    /// Minimum mask for a gender direction.
    #[arg(long, default_value_t = 0.5)]
    pub min_mask: f32,
    /// Minimum |μ_he − μ_she| for a gender direction.
    #[arg(long, default_value_t = 0.1)]
    pub min_diff: f64,
    /// Scale written into generated intervention specs.
    #[arg(long, default_value_t = 20.0)]
    pub sigma_scale: f64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory of a previous `analyze` run.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Directory holding masks.safetensors (default: the run directory).
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Output directory (default: <run-dir>/report).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Divide default split sizes by this factor.
    #[arg(long, default_value_t = 1)]
    pub split_scale: usize,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let validation = e.chain().any(|c| {
        c.downcast_ref::<Usage>().is_some()
            || c.downcast_ref::<DlensError>().is_some_and(DlensError::is_validation)
            || c.downcast_ref::<serde_json::Error>().is_some()
    });
    if validation {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for c in e.chain() {
        let msg = c.to_string();
        if !prev.is_empty() && prev.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_VALIDATION);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

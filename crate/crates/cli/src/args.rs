//! Flag definitions. Every subcommand flag is optional at the clap level so
//! that a `--config` file can supply it; field names double as config keys.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hybridrank::evaluation::ReportFormat;
use hybridrank::similarity::QueryMode;
use hybridrank::training::MiningMode;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "hybridrank", version, about = "Hybrid text/image-query retrieval over precomputed embeddings")]
pub struct Cli {
    /// Worker threads (default: HYBRIDRANK_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dual-space world.
    GenSynth(GenSynthArgs),
    /// Train the aggregator and mixing weight.
    Train(TrainArgs),
    /// Evaluate retrieval modes on a labeled query set.
    Eval(EvalArgs),
    /// Rank the database for one query.
    Query(QueryArgs),
    /// Convert a JSON evaluation report to CSV (or re-emit it as JSON).
    ExportReport(ExportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenSynthArgs {
    /// JSON file with default values for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run manifest path (default: <out>/run.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub d_c: Option<usize>,
    #[arg(long)]
    pub d_i: Option<usize>,
    #[arg(long)]
    pub db_items_per_class: Option<usize>,
    #[arg(long)]
    pub images_per_class_per_generator: Option<usize>,
    #[arg(long)]
    pub num_generators: Option<usize>,
    #[arg(long)]
    pub noise_real: Option<f64>,
    #[arg(long)]
    pub noise_syn: Option<f64>,
    #[arg(long)]
    pub gap_strength: Option<f64>,
    #[arg(long)]
    pub gen_bias_strength: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub real_queries_per_class: Option<usize>,
    #[arg(long)]
    pub map_spread: Option<f64>,
    #[arg(long)]
    pub noise_vlm: Option<f64>,
    #[arg(long)]
    pub vlm_cone: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Training store manifest.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON-lines training log (default: <out>.log.jsonl).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Run manifest path (default: <out>.run.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Rescale stored vectors to unit norm on load.
    #[arg(long)]
    pub renormalize: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes_per_batch: Option<usize>,
    #[arg(long)]
    pub queries_per_class: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    /// dynamic | static
    #[arg(long)]
    pub mining: Option<MiningMode>,
    #[arg(long)]
    pub dual_generator: Option<bool>,
    #[arg(long)]
    pub primary_generator: Option<u8>,
    #[arg(long)]
    pub repeat_inputs: Option<bool>,
    #[arg(long)]
    pub clamp_positive: Option<bool>,
    #[arg(long)]
    pub lambda_trainable: Option<bool>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub logit_temperature: Option<f64>,
    #[arg(long)]
    pub init_noise_std: Option<f64>,
    #[arg(long)]
    pub freeze_aggregator: Option<bool>,
}

/// Flags shared by `eval` and `query` for picking image queries and
/// configuring the aggregator at inference.
#[derive(Debug, Args, Serialize)]
pub struct InferenceArgs {
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub renormalize: Option<bool>,
    /// Generators whose images are used, in order (default: all).
    #[arg(long, value_delimiter = ',')]
    pub generators: Option<Vec<u8>>,
    /// Image queries per generator (default: all).
    #[arg(long)]
    pub k: Option<usize>,
    /// Image queries skipped per generator before taking `k`.
    #[arg(long)]
    pub query_start: Option<usize>,
    #[arg(long)]
    pub repeat_inputs: Option<bool>,
    #[arg(long)]
    pub logit_temperature: Option<f64>,
    #[arg(long)]
    pub renormalize_output: Option<bool>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub inference: InferenceArgs,
    /// Comma-separated modes (default: every mode the inputs allow).
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<QueryMode>>,
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// json | csv
    #[arg(long)]
    pub format: Option<ReportFormat>,
    /// Per-query AP table, one column per mode.
    #[arg(long)]
    pub per_query_csv: Option<PathBuf>,
    /// Label recorded in the report for this query set.
    #[arg(long)]
    pub variant: Option<String>,
    /// Seed recorded in the report.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct QueryArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub inference: InferenceArgs,
    /// Query to run (required when the file holds several).
    #[arg(long)]
    pub query_id: Option<u64>,
    #[arg(long)]
    pub mode: Option<QueryMode>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// JSON report written by `eval`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<ReportFormat>,
    #[arg(long)]
    pub per_query_csv: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reentry_core::labeling::TaskSet;
use reentry_core::model::AttentionOver;
use reentry_core::training::AuxWeightMode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "reentry", version, about = "Conversation re-entry prediction")]
pub struct Cli {
    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Tokenize a raw JSONL corpus.
    Ingest(IngestArgs),
    /// Dump every prediction instance with its derived labels.
    Labels(LabelsArgs),
    /// Print the thread-pattern table.
    Stats(StatsArgs),
    /// Split a corpus into train/valid/test by conversation.
    Split(SplitArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a trained model on a corpus.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on tiny random inputs.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Default,
    Benchmark,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Corpus JSONL to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// Full generator config as JSON; replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of conversations.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pattern mix, e.g. `AB=0.6,ABA=0.4`.
    #[arg(long, value_parser = parse_map)]
    pub weights: Option<BTreeMap<String, f64>>,
    /// Re-entry rate per pattern, e.g. `AB=0.27,ABA=0.35`.
    #[arg(long, value_parser = parse_map)]
    pub rates: Option<BTreeMap<String, f64>>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Content tokens per turn as `MIN,MAX`.
    #[arg(long, value_parser = parse_range)]
    pub turn_len: Option<(usize, usize)>,
    #[arg(long)]
    pub users: Option<usize>,
    /// Drop the per-author salt token.
    #[arg(long)]
    pub no_salt: bool,
    /// Where to echo the resolved config (default `<out>.config.json`).
    #[arg(long)]
    pub config_out: Option<PathBuf>,
    /// Default `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace links with `URL` and drop non-alphabetic tokens.
    #[arg(long)]
    pub reddit_clean: bool,
    /// Default `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct LabelsArgs {
    /// Corpus JSONL to extract instances from.
    #[arg(long, required_unless_present = "records", conflicts_with = "records")]
    pub corpus: Option<PathBuf>,
    /// An existing labels dump to re-label instead of a corpus.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Auxiliary labels to flip, e.g. `sp` or `sp,rt,ta`.
    #[arg(long, default_value = "", value_parser = parse_tasks)]
    pub invert: TaskSet,
    #[arg(long, default_value_t = 2)]
    pub min_prefix: usize,
    /// Corpus supplying chatting histories.
    #[arg(long)]
    pub history_from: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub history_cap: usize,
    /// Output file (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Default `<out>.manifest.json` when `--out` is given.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub min_prefix: usize,
    /// Also print corpus totals as JSON after the table.
    #[arg(long)]
    pub summary: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Receives `train.jsonl`, `valid.jsonl`, `test.jsonl` and `manifest.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_ratios)]
    pub ratios: [f64; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    /// Receives `vocab.json`, `model.ckpt`, `epochs.jsonl`, `outcome.json`
    /// and `manifest.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Corpus supplying chatting histories (default: the training corpus).
    #[arg(long)]
    pub history_from: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub min_prefix: usize,
    /// Minimum training-corpus frequency for a vocabulary entry.
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    /// Pretrained vectors (`token v1 .. vd` per line) for the embedding table.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,

    #[arg(long, default_value_t = 200)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 200)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 10)]
    pub history_cap: usize,
    /// Initialize the target turn from zeros instead of the history.
    #[arg(long)]
    pub no_history: bool,
    /// Mean-pool instead of attending.
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long, default_value = "conv")]
    pub attention_over: AttentionOver,

    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub l2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Auxiliary tasks to train, e.g. `sp,rt,ta`; `''` trains the main task alone.
    #[arg(long, default_value = "sp,rt,ta", value_parser = parse_tasks)]
    pub tasks: TaskSet,
    /// Auxiliary labels to flip in the training data.
    #[arg(long, default_value = "", value_parser = parse_tasks)]
    pub invert: TaskSet,
    #[arg(long, default_value_t = 0.2)]
    pub alpha_sp: f64,
    #[arg(long, default_value_t = 0.2)]
    pub alpha_rt: f64,
    #[arg(long, default_value_t = 0.2)]
    pub alpha_ta: f64,
    #[arg(long, default_value = "paper")]
    pub aux_weight_mode: AuxWeightMode,
    #[arg(long, default_value_t = 100.0)]
    pub weight_cap: f64,
    /// Positive-class weight of the main loss (default `#neg / #pos`).
    #[arg(long)]
    pub lambda_main: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub mu_main: f64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Also log training-set F1 after every epoch.
    #[arg(long)]
    pub eval_train: bool,
    /// Stop once validation F1 reaches this value.
    #[arg(long)]
    pub target_f1: Option<f64>,
    /// Default `<out-dir>/manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Corpus supplying chatting histories (default: the training corpus
    /// recorded in the model's manifest).
    #[arg(long)]
    pub history_from: Option<PathBuf>,
    /// Decision threshold (default: the one used in training).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also print metrics per thread pattern.
    #[arg(long)]
    pub by_pattern: bool,
    /// Patterns with fewer instances are pooled under `other`.
    #[arg(long, default_value_t = 1)]
    pub pattern_min_count: usize,
    /// Print JSON instead of TSV.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub instances: usize,
    #[arg(long, default_value_t = 10)]
    pub vocab: usize,
    #[arg(long, default_value_t = 4)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Sample at most this many entries per instance (default: all).
    #[arg(long)]
    pub max_entries: Option<usize>,
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn parse_tasks(s: &str) -> Result<TaskSet, String> {
    s.parse().map_err(|e: reentry_core::Error| e.to_string())
}

fn parse_map(s: &str) -> Result<BTreeMap<String, f64>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| format!("expected KEY=VALUE, got {pair:?}"))?;
            let v: f64 = v.trim().parse().map_err(|e| format!("{pair:?}: {e}"))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected MIN,MAX, got {s:?}"))?;
    let lo = lo.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    Ok((lo, hi))
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{s:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected three ratios, got {s:?}"))
}

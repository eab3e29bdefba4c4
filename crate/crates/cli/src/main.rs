//! `csf`: data generation, tokenizer and model training, evaluation,
//! inference, benchmarking and packaging.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "csf", version, about = "Multilingual semantic slot extraction and GLOSS generation")]
struct Cli {
    /// Worker threads for tensor kernels (bench always pins to one).
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the labelled train/val dataset from the template bank.
    GenData(GenDataArgs),
    /// Train the byte-level BPE tokenizer on a generated dataset.
    TrainTokenizer(TrainTokenizerArgs),
    /// Train the slot model; writes checkpoints and the epoch history.
    Train(TrainArgs),
    /// Per-slot accuracy and top confusions on a dataset split.
    Eval(EvalArgs),
    /// Extract the slot frame and GLOSS for one utterance.
    Infer(InferArgs),
    /// Single-thread latency statistics for one utterance.
    Bench(BenchArgs),
    /// Build the deployable package directory from a checkpoint.
    Package(PackageArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Records,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScopeArg {
    /// Encode, forward, argmax and GLOSS conversion.
    EndToEnd,
    /// Forward and argmax on a pre-encoded input.
    ForwardOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    F16,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Sampling seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of training records.
    #[arg(long, default_value_t = 16_996)]
    train: usize,
    /// Number of validation records.
    #[arg(long, default_value_t = 1_889)]
    val: usize,
    /// Fraction of records per split with condition NONE.
    #[arg(long, default_value_t = 0.226)]
    none_fraction: f64,
    /// Output directory for train.jsonl and val.jsonl.
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainTokenizerArgs {
    /// Dataset directory; both splits form the training corpus.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Target vocabulary size, specials and byte tokens included.
    #[arg(long, default_value_t = 8000)]
    vocab: usize,
    /// Longest merged token in bytes.
    #[arg(long, default_value_t = csf_core::tokenizer::DEFAULT_MAX_TOKEN_BYTES)]
    max_token_bytes: usize,
    /// Output tokenizer file.
    #[arg(long, default_value = "tokenizer.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory with train.jsonl and val.jsonl.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Tokenizer file.
    #[arg(long, default_value = "tokenizer.json")]
    tokenizer: PathBuf,
    /// Output directory for best.bin, final.bin and history.jsonl.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Seed for initialization, shuffling and dropout.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Batch size; the last short batch is kept.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Peak learning rate of the OneCycle schedule.
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Passes over the training split.
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    /// Warmup share of all optimizer steps.
    #[arg(long, default_value_t = 0.10)]
    warmup: f64,
    /// AdamW decoupled weight decay.
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    /// Model width.
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    /// Attention heads per layer.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Transformer blocks.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Feed-forward width.
    #[arg(long, default_value_t = 1024)]
    ffn: usize,
    /// Embedding rows; must cover the tokenizer vocabulary.
    #[arg(long, default_value_t = 8000)]
    vocab: usize,
    /// Sequence length including [CLS] and [SEP].
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Training-time dropout on attention weights and FFN outputs.
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
}

/// Where the model comes from: a package, or a checkpoint plus tokenizer.
#[derive(Debug, Args)]
struct ModelSource {
    /// Package directory [default: none; required unless --checkpoint is given].
    #[arg(long, required_unless_present = "checkpoint", conflicts_with_all = ["checkpoint", "tokenizer"])]
    package: Option<PathBuf>,
    /// Checkpoint file, used with --tokenizer [default: none].
    #[arg(long, requires = "tokenizer")]
    checkpoint: Option<PathBuf>,
    /// Tokenizer file, used with --checkpoint [default: none].
    #[arg(long, requires = "checkpoint")]
    tokenizer: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Dataset directory.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Split to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// Confused pairs listed per slot.
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    /// Output layout: aligned text or one JSON record.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Utterance [default: one line read from standard input].
    #[arg(long)]
    text: Option<String>,
    /// Output layout: aligned text or one JSON record.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Utterance to time.
    #[arg(long, default_value = "I go to school tomorrow.")]
    text: String,
    /// Timed runs.
    #[arg(long, default_value_t = 100)]
    runs: usize,
    /// Untimed runs before measuring.
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// What each timed run covers.
    #[arg(long, value_enum, default_value_t = ScopeArg::EndToEnd)]
    scope: ScopeArg,
    /// Output layout: aligned text or one JSON record.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Args)]
struct PackageArgs {
    /// Checkpoint to package.
    #[arg(long, default_value = "run/best.bin")]
    checkpoint: PathBuf,
    /// Tokenizer to package.
    #[arg(long, default_value = "tokenizer.json")]
    tokenizer: PathBuf,
    /// Output package directory.
    #[arg(long, default_value = "package")]
    out: PathBuf,
    /// Weight storage precision; f16 is lossy and needs --data to report its accuracy cost.
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32, requires_if("f16", "data"))]
    precision: PrecisionArg,
    /// Dataset directory used to measure f16 accuracy against f32 [default: none].
    #[arg(long)]
    data: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    csf_core::tensor::set_num_threads(cli.threads as usize);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

//! Command-line front-end: synthesize or ingest data, split, train, build an
//! index, query it and evaluate retrieval quality.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::builder::TypedValueParser;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gpq::GpqError;

pub mod commands;
pub mod config;
pub mod manifest;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_SHAPE: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "gpq", version = manifest::VERSION, about = "Semi-supervised product quantization retrieval")]
#[command(args_override_self = true)]
pub struct Cli {
    /// key=value file supplying defaults for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic Gaussian-mixture dataset.
    Synth(SynthArgs),
    /// Split a dataset into labeled, unlabeled, database and query sets.
    Split(SplitArgs),
    /// Train a model and write a checkpoint plus per-epoch log.
    Train(TrainArgs),
    /// Encode the database items into an index file.
    Build(BuildArgs),
    /// Search an index and print ranked results.
    Query(QueryArgs),
    /// Report mAP and precision@k for the split's queries.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    pub classes: u32,
    #[arg(long, default_value_t = 600, value_parser = clap::value_parser!(u32).range(1..))]
    pub per_class: u32,
    #[arg(long, default_value_t = 96, value_parser = clap::value_parser!(u32).range(1..))]
    pub dim: u32,
    #[arg(long, default_value_t = 0.15)]
    pub spread: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset file (GPQD binary, or CSV when the name ends in .csv).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "1")]
    pub protocol: Protocol,
    #[arg(long, default_value_t = 50)]
    pub labels_per_class: usize,
    #[arg(long, default_value_t = 100)]
    pub query_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtoUpdateArg {
    Never,
    AfterTraining,
    EveryEpoch,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Checkpoint path.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Per-epoch metrics log (defaults to `<out>.log`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Code length; sets M = bits / log2(K).
    #[arg(long, default_value = "48", value_parser = clap::builder::PossibleValuesParser::new(["12", "24", "32", "48"]).map(|s| s.parse::<u32>().unwrap()))]
    pub bits: u32,
    /// Codewords per subspace.
    #[arg(long = "K", default_value_t = 16)]
    pub num_codewords: usize,
    #[arg(long, default_value_t = 12)]
    pub sub_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 20.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 4.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 0.0002)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub decay_rate: f64,
    #[arg(long, default_value_t = 500)]
    pub decay_interval: u64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train the prototype classifier; `false` gives the N-pair-only model.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub classifier: bool,
    #[arg(long, value_enum, default_value = "after-training")]
    pub proto_update: ProtoUpdateArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split file whose database ids are indexed; all items when absent.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Replace codewords by their soft assignment to the prototypes first.
    #[arg(long, value_enum, default_value = "off")]
    pub proto_update: Switch,
    /// Soft-assignment scale for the prototype update (checkpoint alpha if absent).
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset holding the query items named by --ids.
    #[arg(long, requires = "ids")]
    pub data: Option<PathBuf>,
    /// Comma-separated item ids of --data to use as queries.
    #[arg(long, value_delimiter = ',', requires = "data")]
    pub ids: Vec<u64>,
    /// Headerless CSV of raw query vectors, one per line.
    #[arg(long, conflicts_with = "data")]
    pub vectors: Option<PathBuf>,
    #[arg(short, long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    /// Also write a run manifest to this path.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    None,
    Pq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    KeyValue,
    Table,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Comma-separated cutoffs for precision@k.
    #[arg(long = "precision-at", value_delimiter = ',')]
    pub precision_at: Vec<usize>,
    /// Truncate rankings to this many items for mAP.
    #[arg(long)]
    pub cutoff: Option<usize>,
    #[arg(long, value_enum, default_value = "none")]
    pub baseline: Baseline,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "key-value")]
    pub format: ReportFormat,
    /// Also write the report to this file.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

/// Exit code for a library error.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<GpqError>() {
            return match e {
                GpqError::Io(_)
                | GpqError::BadMagic { .. }
                | GpqError::VersionMismatch { .. }
                | GpqError::Truncated { .. }
                | GpqError::Parse(_)
                | GpqError::MalformedBytes { .. }
                | GpqError::UnknownId(_) => EXIT_IO,
                GpqError::Diverged(_) | GpqError::NonFiniteGradient(_) => EXIT_DIVERGED,
                GpqError::ShapeMismatch(_) | GpqError::InvalidShape(_) | GpqError::IndexOutOfRange { .. } => EXIT_SHAPE,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_str()?;
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Parses arguments (merging any config file) and runs the command,
/// returning the process exit code.
pub fn run(args: Vec<OsString>) -> u8 {
    let args = match config_path(&args) {
        Some(path) => match config::merge(args, &path) {
            Ok(a) => a,
            Err(e) => {
                eprintln!("error: {e:#}");
                return if e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some()) {
                    EXIT_IO
                } else {
                    EXIT_USAGE
                };
            }
        },
        None => args,
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}

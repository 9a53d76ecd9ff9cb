//! `mobiclr` — ingest trips, pretrain the encoders, extract region
//! embeddings, probe them, and script the experiment grids.
//!
//! Every command reads one run-config (TOML), applies `--set` overrides and
//! the command's own shortcut flags on top, validates the result, and writes
//! a resolved copy next to its outputs. Exit code 0 means success, 2 a usage
//! problem (bad flags, config, or input schema), 1 anything else.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

/// Environment variable naming the default output root. Each command writes
/// to `<root>/<command>` unless `--out` or `out_dir` says otherwise.
pub const OUT_ROOT_ENV: &str = "MOBICLR_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "mobiclr", version, about = "Contrastive region embeddings from hourly inbound/outbound trip counts")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// Run-config file (TOML). Missing sections take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Global seed; replaces `train.seed` and `synth.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory. Default: `$MOBICLR_OUT_ROOT/<command>`, else
    /// `runs/<command>`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads for experiment cells.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Config override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bin a trip file into an hourly inbound/outbound count series.
    Ingest {
        #[arg(long, value_name = "CSV")]
        trips: Option<PathBuf>,
        /// GeoJSON regions or a plain id list.
        #[arg(long, value_name = "FILE")]
        regions: Option<PathBuf>,
        /// First hour of the window (epoch seconds or a date-time).
        #[arg(long, value_name = "TIME")]
        window_start: Option<String>,
        #[arg(long, value_name = "N")]
        hours: Option<usize>,
    },
    /// Pretrain the three encoders on a series.
    Train {
        #[arg(long, value_name = "FILE")]
        series: Option<PathBuf>,
    },
    /// Pooled joint-encoder embeddings for every region.
    Embed {
        #[arg(long, value_name = "FILE")]
        series: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Ridge-probe embeddings (or the raw series) against region targets.
    Evaluate {
        /// Embeddings (`.csv` or container).
        #[arg(long, value_name = "FILE")]
        embeddings: Option<PathBuf>,
        #[arg(long, value_name = "CSV")]
        targets: Option<PathBuf>,
        /// Target columns, comma separated. Default: every column.
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        /// Probe the z-scored series itself instead of embeddings.
        #[arg(long, value_enum)]
        raw: Option<RawFeatures>,
        /// Series for `--raw`.
        #[arg(long, value_name = "FILE")]
        series: Option<PathBuf>,
    },
    /// Run the `[[experiment]]` plans of the config, or one default plan.
    Experiment {
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        #[arg(long, value_name = "FILE")]
        series: Option<PathBuf>,
        #[arg(long, value_name = "CSV")]
        targets: Option<PathBuf>,
    },
    /// Generate a synthetic city with a planted indicator.
    Synth {
        #[arg(long, value_name = "N")]
        regions: Option<usize>,
        #[arg(long, value_name = "T")]
        steps: Option<usize>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawFeatures {
    Inbound,
    Outbound,
    Both,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum KindArg {
    AugGrid,
    Ablation,
    Sensitivity,
    Transfer,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] mobiclr::Error),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_usage() => 2,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        use mobiclr::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Core(e) => match e {
                E::Argument(_) => "argument",
                E::Shape { .. } => "shape",
                E::Config(_) => "config",
                E::Schema { .. } => "schema",
                E::MissingColumn { .. } => "missing_column",
                E::NonFiniteLoss { .. } => "non_finite_loss",
                E::ZeroVariance => "zero_variance",
                E::Container { .. } => "container",
                E::Io { .. } => "io",
                E::Csv(_) => "csv",
                E::Json(_) => "json",
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn init_logging(g: &Global) {
    let level = match (g.quiet, g.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("MOBICLR_LOG")
        .format_timestamp(None)
        .init();
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest { trips, regions, window_start, hours } => {
            commands::ingest(g, commands::IngestArgs { trips, regions, window_start, hours })
        }
        Command::Train { series } => commands::train(g, series),
        Command::Embed { series, checkpoint } => commands::embed(g, series, checkpoint),
        Command::Evaluate { embeddings, targets, columns, raw, series } => {
            commands::evaluate(g, commands::EvaluateArgs { embeddings, targets, columns, raw, series })
        }
        Command::Experiment { kind, series, targets } => commands::experiment(g, kind, series, targets),
        Command::Synth { regions, steps } => commands::synth(g, regions, steps),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging(&cli.global);
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {e}");
            let record = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string(), "exit_code": code }
            });
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}

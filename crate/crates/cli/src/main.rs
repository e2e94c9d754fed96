//! `headstage`: command-line front end for the spike detection and
//! classification toolchain.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

pub use config::CliConfig;

/// Failure categories, mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
    Infeasible(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
            CliError::Infeasible(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Infeasible(m) => write!(f, "infeasible: {m}"),
        }
    }
}

impl From<headstage::Error> for CliError {
    fn from(e: headstage::Error) -> Self {
        use headstage::Error;
        match e {
            Error::Io(e) => CliError::Io(e.to_string()),
            Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => CliError::Io(e.to_string()),
            Error::Json(e) if e.is_io() => CliError::Io(e.to_string()),
            Error::Infeasible(m) => CliError::Infeasible(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "headstage", version, about = "Spike detection, classification and resource modelling for a Purkinje-cell head stage")]
pub struct Cli {
    /// TOML configuration file; see the key list below.
    #[arg(long, short, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a recording and its ground-truth annotations.
    Generate(GenerateArgs),
    /// Run the detector alone and list honoured detection ticks.
    Detect(DetectArgs),
    /// Capture and label detected waveforms.
    BuildDataset(BuildDatasetArgs),
    /// Train a float model on a held-in split and report held-out accuracy.
    Train(TrainArgs),
    /// Quantize a float model to int8.
    Quantize(QuantizeArgs),
    /// Cross-validated topology grid search.
    Dse(DseArgs),
    /// Run the head-stage pipeline over a recording.
    Run(RunArgs),
    /// Apply the simple-spike dead zone to an event log.
    Postprocess(PostprocessArgs),
    /// Power, battery and storage report.
    Report(ReportArgs),
    /// Match events against annotations and report accuracy.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub annotations: PathBuf,
    /// Overrides recording.duration_s.
    #[arg(long)]
    pub duration_s: Option<f64>,
    /// Overrides recording.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// CSV with one `detection_tick` per honoured detection.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Per-tick CSV trace (raw, smoothed, NEO, threshold, state) for plotting.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    /// Model used to label events in the trace.
    #[arg(long, value_name = "FILE", requires = "trace")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub annotations: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Downsample every class to the size of the smallest one.
    #[arg(long)]
    pub balance: bool,
    /// Seed for --balance; defaults to train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Comma-separated layer sizes, input 40 and output 3.
    #[arg(long, value_delimiter = ',', default_value = "40,16,7,5,4,3")]
    pub topology: Vec<usize>,
    /// Overrides train.ortho_lambda.
    #[arg(long)]
    pub rf: Option<f64>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Per-epoch losses as JSON lines.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Held-out metrics of the quantized model as JSON.
    #[arg(long, value_name = "FILE")]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Dataset whose waveforms calibrate the activation scales.
    #[arg(long, value_name = "FILE")]
    pub calib: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    Table3,
    Full,
}

#[derive(Debug, Args)]
pub struct DseArgs {
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Overrides dse.grid.
    #[arg(long, value_enum)]
    pub grid: Option<GridArg>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Writes the selected topology as JSON.
    #[arg(long, value_name = "FILE")]
    pub select: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Quantized (or float) model file.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Packed event log.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub stats: Option<PathBuf>,
    /// Every emitted event, including F, as CSV.
    #[arg(long, value_name = "FILE")]
    pub events_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Overrides postprocess.dead_zone_ms.
    #[arg(long)]
    pub dead_zone_ms: Option<f64>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run statistics; their classification rate replaces resources.spike_rate_hz.
    #[arg(long, value_name = "FILE")]
    pub stats: Option<PathBuf>,
    /// Experiment length used for storage sizing.
    #[arg(long, default_value_t = 86_400.0)]
    pub duration_s: f64,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Packed event log.
    #[arg(long, value_name = "FILE")]
    pub events: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub annotations: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Overrides metrics.tolerance_ms.
    #[arg(long)]
    pub tolerance_ms: Option<f64>,
    /// Ignore events and annotations before this time.
    #[arg(long, default_value_t = 0.0)]
    pub start_s: f64,
}

fn parse_cli() -> Cli {
    let matches = Cli::command()
        .after_long_help(config::config_help())
        .get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn main() -> ExitCode {
    let cli = parse_cli();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

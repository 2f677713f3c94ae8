use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mixq_core::{BitwidthCombination, ResourceKind};

#[derive(Debug, Parser)]
#[command(name = "mixq", about = "Resource-aware mixed-precision quantization for small FPGA Transformers")]
pub struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads (default: all cores, 1 for `train`).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build, validate, show or export a knowledge database.
    Kb {
        #[command(subcommand)]
        action: KbAction,
    },
    /// Predict resource utilization of one bitwidth combination.
    Estimate(EstimateArgs),
    /// Filter all combinations by thresholds and rank the survivors.
    Search(SearchArgs),
    /// Train a float (or quantization-aware) forecasting model.
    Train(TrainArgs),
    /// Convert a trained model to an integer-only model.
    Quantize(QuantizeArgs),
    /// RMSE of a float or quantized model on the test split.
    Eval(EvalArgs),
    /// Forecast the step after the last window of a CSV.
    Infer(InferArgs),
    /// Write the deterministic synthetic time series.
    Synth(SynthArgs),
    /// Search, then train, quantize and evaluate every selected combination.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Subcommand)]
pub enum KbAction {
    /// Aggregate a directory of per-run report CSVs by median.
    Build {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a database file for schema and completeness errors.
    Validate { file: PathBuf },
    /// Print the entries for one sequence length.
    Show {
        /// Database file (default: the bundled one).
        file: Option<PathBuf>,
        #[arg(long)]
        n: u32,
        #[arg(long)]
        component: Option<String>,
    },
    /// Write the bundled database to a file.
    Export { out: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OverheadColumn {
    /// Largest bitwidth in the combination.
    Max,
    /// Most frequent bitwidth.
    Mode,
    /// Largest entry over all three bitwidths.
    PerResourceMax,
}

#[derive(Debug, Args)]
pub struct KbSource {
    /// Knowledge database file (default: the bundled one).
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Add the overhead pseudo-components.
    #[arg(long)]
    pub overhead: bool,
    #[arg(long, value_enum, default_value_t = OverheadColumn::Max)]
    pub overhead_rule: OverheadColumn,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub source: KbSource,
    #[arg(long)]
    pub n: u32,
    /// Ten bitwidths, L_INPUT first, e.g. 8,8,6,8,6,4,8,8,8,8.
    #[arg(long, value_parser = parse_combo)]
    pub combo: BitwidthCombination,
}

#[derive(Debug, Args, Clone)]
pub struct ThresholdArgs {
    #[arg(long, default_value_t = 100.0)]
    pub t_luts: f64,
    #[arg(long, default_value_t = 100.0)]
    pub t_dram: f64,
    #[arg(long, default_value_t = 100.0)]
    pub t_bram: f64,
    #[arg(long, default_value_t = 100.0)]
    pub t_dsps: f64,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub source: KbSource,
    #[arg(long)]
    pub n: u32,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    /// Restrict the search to the combinations listed in this file.
    #[arg(long)]
    pub combos: Option<PathBuf>,
    /// Also write the JSON result here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print a CSV histogram of this resource over the survivors instead.
    #[arg(long, value_parser = parse_resource)]
    pub histogram: Option<ResourceKind>,
    /// Histogram bin count (default 20).
    #[arg(long, requires = "histogram")]
    pub bins: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Target column (default: the last column).
    #[arg(long)]
    pub target: Option<String>,
    /// Timestamp column (default: a column named `timestamp`, if any).
    #[arg(long)]
    pub timestamp: Option<String>,
    /// Comma-separated feature columns (default: all numeric columns).
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// Share of pairs held out for testing.
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 12)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    /// Input width, or `auto` to use the number of data columns.
    #[arg(long, default_value = "auto")]
    pub m: String,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Quantization-aware training at these bitwidths.
    #[arg(long, value_parser = parse_combo)]
    pub qat: Option<BitwidthCombination>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the per-epoch training report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration data, read with the model's own columns and scaler.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub timestamp: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    #[arg(long, value_parser = parse_combo)]
    pub combo: BitwidthCombination,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Must match the model's target column when given.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub timestamp: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    /// Evaluate on every pair instead of the test split.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub timestamp: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub source: KbSource,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory that receives `<timestamp>-<hash>/` run folders.
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Exact run directory, overriding the generated name.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

fn parse_combo(s: &str) -> Result<BitwidthCombination, String> {
    s.parse().map_err(|e: mixq_core::estimate::ComboParseError| e.reason)
}

fn parse_resource(s: &str) -> Result<ResourceKind, String> {
    s.parse().map_err(|_| format!("`{s}` is not one of luts, dram, bram, dsps"))
}

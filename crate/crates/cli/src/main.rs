//! `exitsim`: generate traces, simulate early-exit serving, and summarize
//! the results.

mod commands;
mod error;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use exitsim::sim::Mode;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "exitsim", version, about = "Trace-driven early-exit serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a request or token trace for a profile.
    GenTrace(GenTraceArgs),
    /// Check a trace against a profile, or a report against its schema.
    Validate(ValidateArgs),
    /// Run one serving mode over a request trace.
    Simulate(SimulateArgs),
    /// Run the token-level decoding simulation.
    SimulateGen(SimulateGenArgs),
    /// Run vanilla, adaptive and optimal serving on the same trace.
    Compare(CompareArgs),
    /// Percentiles and CDF table from a report.
    Report(ReportArgs),
    /// Tune thresholds for a fixed ramp set, optionally against grid search.
    Tune(TuneArgs),
    /// Re-execute the command recorded in a report's manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
struct GenTraceArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// AR(1) coefficient of input difficulty, in [0, 1).
    #[arg(long, default_value_t = 0.5)]
    continuity: f64,
    /// Agreement at the first feasible site.
    #[arg(long, default_value_t = 0.3)]
    agreement_lo: f64,
    /// Agreement at the last feasible site.
    #[arg(long, default_value_t = 0.95)]
    agreement_hi: f64,
    /// JSON object mapping layer name to agreement; overrides lo/hi.
    #[arg(long)]
    agreement_file: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    interarrival_ms: f64,
    #[arg(long, default_value_t = 10)]
    classes: u32,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    separation: f64,
    /// Record index at which the agreement curve switches.
    #[arg(long, requires_all = ["drift_lo", "drift_hi"])]
    drift_at: Option<usize>,
    #[arg(long)]
    drift_lo: Option<f64>,
    #[arg(long)]
    drift_hi: Option<f64>,
    /// Emit a token trace instead of a request trace.
    #[arg(long)]
    tokens: bool,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, requires = "profile", conflicts_with_all = ["tokens", "report"])]
    trace: Option<PathBuf>,
    #[arg(long, requires = "profile", conflicts_with = "report")]
    tokens: Option<PathBuf>,
    /// A JSON file written by this tool.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Flags shared by the request-serving commands.
#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 100.0)]
    slo: f64,
    #[arg(long, default_value_t = 16)]
    max_batch: u32,
    /// Tolerated accuracy loss relative to the full model.
    #[arg(long, default_value_t = 0.01)]
    acc_constraint: f64,
    /// Ramp latency budget as a fraction of vanilla latency.
    #[arg(long, default_value_t = 0.02)]
    budget: f64,
    #[arg(long)]
    no_adapt: bool,
    /// Leading records used for the initial tuning.
    #[arg(long, default_value_t = 128)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0.1)]
    init_step: f64,
    #[arg(long, default_value_t = 0.01)]
    min_step: f64,
    #[arg(long, default_value_t = 16)]
    acc_window: usize,
    #[arg(long, default_value_t = 128)]
    history: usize,
    #[arg(long, default_value_t = 128)]
    ramp_period: usize,
    #[arg(long, default_value_t = 1)]
    score_window: usize,
    #[arg(long)]
    max_ramps: Option<usize>,
    #[arg(long)]
    drop_late: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    serve: ServeArgs,
    #[arg(long, default_value = "apparate")]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
    /// Per-request rows.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    serve: ServeArgs,
    #[arg(long)]
    out: PathBuf,
    /// One summary row per mode.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateGenArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 4)]
    flush_cap: usize,
    /// Batch-size multipliers, e.g. "2=1.1,4=1.3".
    #[arg(long, value_delimiter = ',')]
    penalty: Vec<String>,
    /// Comma-separated layers to start with instead of the budgeted placement.
    #[arg(long, value_delimiter = ',')]
    ramps: Vec<String>,
    #[arg(long, default_value_t = 0.02)]
    budget: f64,
    #[arg(long, default_value_t = 1)]
    max_ramps: usize,
    #[arg(long, default_value_t = 0.01)]
    acc_constraint: f64,
    #[arg(long)]
    no_adapt: bool,
    #[arg(long, default_value_t = 128)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0.1)]
    init_step: f64,
    #[arg(long, default_value_t = 0.01)]
    min_step: f64,
    #[arg(long, default_value_t = 16)]
    acc_window: usize,
    #[arg(long, default_value_t = 128)]
    history: usize,
    #[arg(long, default_value_t = 128)]
    ramp_period: usize,
    #[arg(long)]
    out: PathBuf,
    /// Per-token rows.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "25,50,95")]
    percentiles: Vec<f64>,
    /// CDF table (latency_ms, cumulative_fraction).
    #[arg(long)]
    cdf: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    /// Comma-separated ramp layers.
    #[arg(long, value_delimiter = ',', required = true)]
    ramps: Vec<String>,
    /// Use only the first N records.
    #[arg(long)]
    records: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    acc_constraint: f64,
    #[arg(long, default_value_t = 0.1)]
    init_step: f64,
    #[arg(long, default_value_t = 0.01)]
    min_step: f64,
    /// Also run exhaustive search at this lattice step.
    #[arg(long)]
    grid_step: Option<f64>,
    #[arg(long, default_value_t = exitsim::tuner::DEFAULT_GRID_CAP)]
    grid_cap: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RerunArgs {
    /// A report or sidecar manifest written by this tool.
    file: PathBuf,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match execute(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("exitsim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Parses and runs one invocation; `argv` excludes the program name.
fn execute(argv: &[String]) -> CliResult<()> {
    let cli = match Cli::try_parse_from(std::iter::once("exitsim".to_string()).chain(argv.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => return Err(CliError::Usage(e.to_string())),
        Err(e) => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
    };
    match cli.command {
        Command::GenTrace(a) => commands::gen_trace(argv, a),
        Command::Validate(a) => commands::validate(a),
        Command::Simulate(a) => commands::simulate(argv, a),
        Command::SimulateGen(a) => commands::simulate_gen(argv, a),
        Command::Compare(a) => commands::compare(argv, a),
        Command::Report(a) => commands::report(argv, a),
        Command::Tune(a) => commands::tune(argv, a),
        Command::Rerun(a) => commands::rerun(a),
    }
}

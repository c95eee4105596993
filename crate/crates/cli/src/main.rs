//! `podnet`: generate demonstrations, train, segment, evaluate and plan.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use podnet_core::EnvKind;

/// Usage and configuration problems exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(err: anyhow::Error) -> Self {
        CliError::Runtime(err)
    }
}

impl From<podnet_core::PodnetError> for CliError {
    fn from(err: podnet_core::PodnetError) -> Self {
        CliError::Runtime(err.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Runtime(err.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::Runtime(err.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "podnet", version, about = "Option discovery from demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic demonstrations (JSONL) and the environment spec (JSON).
    GenData(GenDataArgs),
    /// Train a model; writes checkpoint.json, history.csv and config.resolved.json.
    Train(TrainArgs),
    /// Search the number of options by held-out behavior-cloning loss.
    DiscoverK(DiscoverArgs),
    /// Label every step of every trajectory with an option.
    Segment(SegmentArgs),
    /// Score a segmentation against ground-truth labels.
    Eval(EvalArgs),
    /// Plan an option sequence toward a goal, optionally executing it.
    Plan(PlanArgs),
    /// Export trajectories and labels over time as CSV for plotting.
    PlotData(PlotArgs),
}

fn parse_env(s: &str) -> Result<EnvKind, String> {
    s.parse::<EnvKind>().map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_parser = parse_env)]
    env: EnvKind,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the environment spec [default: <out> with extension .env.json].
    #[arg(long)]
    spec_out: Option<PathBuf>,
    /// Reuse an existing environment spec instead of sampling one.
    #[arg(long, conflicts_with_all = ["env_seed", "k_true"])]
    spec: Option<PathBuf>,
    /// Seed for the environment layout (waypoints) [default: --seed].
    #[arg(long)]
    env_seed: Option<u64>,
    /// Number of waypoints for waypoint2d.
    #[arg(long)]
    k_true: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct DiscoverArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    kmin: usize,
    #[arg(long)]
    kmax: usize,
    /// CSV destination for the (K, heldout_bc) table.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Labels JSONL destination.
    #[arg(long)]
    out: PathBuf,
    /// Report JSON destination, written when the data carries labels.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Must equal the checkpoint's training stride when given.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report JSON destination [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Goal state in environment units, e.g. "8,2".
    #[arg(long, value_parser = config::parse_vector, allow_hyphen_values = true)]
    goal: ::std::vec::Vec<f64>,
    /// Start state in environment units [default: the training data mean].
    #[arg(long, value_parser = config::parse_vector, allow_hyphen_values = true)]
    start: Option<::std::vec::Vec<f64>>,
    /// Planner settings are read from the config's "planner" section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Plan JSON destination [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Execute the plan in the environment described by this spec file.
    #[arg(long)]
    execute: Option<PathBuf>,
    /// Execution trace JSON destination (with --execute).
    #[arg(long, requires = "execute")]
    trace: Option<PathBuf>,
    /// Execution trace CSV destination (with --execute).
    #[arg(long, requires = "execute")]
    trace_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    data: PathBuf,
    /// Add predicted labels; rows become downsampled steps.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::DiscoverK(a) => commands::discover_k(a),
        Command::Segment(a) => commands::segment(a),
        Command::Eval(a) => commands::eval(a),
        Command::Plan(a) => commands::plan(a),
        Command::PlotData(a) => commands::plot_data(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(err.exit_code().clamp(0, 255) as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

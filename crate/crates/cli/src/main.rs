mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowspike::parallel;

/// Spiking optical-flow engine for event cameras.
#[derive(Debug, Parser)]
#[command(name = "flowspike", version, about)]
pub struct Cli {
    /// JSON file with `arch`, `train` and `window_us` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for weight init and synthetic data.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for the data-parallel kernels (falls back to FLOWSPIKE_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Slice an event file into windows and write the network inputs as JSON lines.
    Encode(EncodeArgs),
    /// Generate a translating-bar event file and its ground-truth flow.
    Synth(SynthArgs),
    /// Train a model on an event file with the self-supervised loss.
    Train(TrainArgs),
    /// Predict one flow field per window.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Record the non-zero fraction of every layer per time step.
    ProfileActivity(ActivityArgs),
    /// Measure single-input latency.
    ProfileSpeed(SpeedArgs),
    /// Parameter count, speed and quality over a stage × channel grid.
    Sweep(SweepArgs),
    /// Render a flow file as a colour-wheel PNG.
    Viz(VizArgs),
    /// Serve live flow over TCP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub window_us: Option<u64>,
    /// `voxel` or `count`; defaults to the configured input coding.
    #[arg(long)]
    pub coding: Option<String>,
    /// Voxel bins; defaults to the configured input channels.
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_events: PathBuf,
    #[arg(long)]
    pub out_gt: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 40)]
    pub windows: usize,
    #[arg(long)]
    pub window_us: Option<u64>,
    /// Pixels per window as `u,v`.
    #[arg(long, default_value = "1,1", value_parser = parse_pair)]
    pub velocity: (f32, f32),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub events: PathBuf,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Per-chunk loss log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub window_us: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub window_us: Option<u64>,
    /// Also write a colour-wheel PNG per window.
    #[arg(long)]
    pub png: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted flow; repeat for one file per window.
    #[arg(long)]
    pub pred: Vec<PathBuf>,
    /// Ground truth; one file, or one per prediction.
    #[arg(long)]
    pub gt: Vec<PathBuf>,
    /// Events whose pixels define the evaluation mask.
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Window length used to pair windows with predictions.
    #[arg(long)]
    pub window_us: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub dt: u32,
    #[arg(long, default_value = "sequence")]
    pub name: String,
    /// Instead of scoring files, combine four per-sequence AEEs
    /// (outdoor_day1, indoor_flying1..3) into the weighted AEE.
    #[arg(long, value_delimiter = ',')]
    pub aees: Option<Vec<f64>>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ActivityArgs {
    /// Checkpoint; without it a fresh model is built from the config.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub window_us: Option<u64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpeedArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    /// Use the whole worker pool instead of one core.
    #[arg(long)]
    pub multi_thread: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "5,3,2")]
    pub stages: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "32,24,16,12")]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Timed runs per grid point; 0 skips timing.
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scatter-plot data (x = fps, y = metric, size = parameters).
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Directory holding `s{stages}_c{channels}.snuc` checkpoints to score.
    #[arg(long, requires_all = ["events", "gt"])]
    pub checkpoints: Option<PathBuf>,
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub window_us: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overlay one arrow per N×N cell.
    #[arg(long)]
    pub arrows: Option<usize>,
    /// Magnitude of a fully saturated colour; the field maximum by default.
    #[arg(long)]
    pub max_mag: Option<f32>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub window_us: u64,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: String,
    /// Sensor size for a fresh model when no checkpoint is given.
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    /// Exit after this many connections have finished.
    #[arg(long)]
    pub max_connections: Option<usize>,
}

fn parse_pair(s: &str) -> Result<(f32, f32), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated numbers")?;
    let p = |x: &str| x.trim().parse::<f32>().map_err(|e| format!("'{x}': {e}"));
    Ok((p(a)?, p(b)?))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .find_map(|e| e.downcast_ref::<flowspike::error::Error>())
        .is_some_and(|e| e.is_validation());
    if validation {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    parallel::init_global(parallel::resolve_threads(cli.threads));
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

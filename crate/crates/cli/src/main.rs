//! `pgrefine` command-line entry point.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Refines rough path-gain estimates into high-fidelity heatmaps.
#[derive(Debug, Parser)]
#[command(name = "pgrefine", version)]
pub struct Cli {
    /// Master seed for every stochastic stage.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate training samples from a map or from random synthetic cities.
    Gen(GenArgs),
    /// Train a model on a sample directory.
    Train(TrainArgs),
    /// Predict heatmaps with a trained model.
    Predict(PredictArgs),
    /// Evaluate predictions against ground truth.
    Eval(EvalArgs),
    /// Train and evaluate over a range of split ratios.
    Sweep(SweepArgs),
    /// Turn a channel-sounder capture into a calibrated path-gain trace.
    Sound(SoundArgs),
    /// Fine-tune a pretrained model on a fraction of new data.
    Refine(RefineArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Sound(_) => "sound",
            Command::Refine(_) => "refine",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    /// Tile side in pixels.
    #[arg(long, default_value_t = 100)]
    pub tile_px: usize,
    /// Coarse grid factor of the rough estimate.
    #[arg(long, default_value_t = 4)]
    pub coarse_factor: usize,
    /// TX antenna height above the local raster (m).
    #[arg(long, default_value_t = 2.0)]
    pub tx_height: f64,
    /// RX antenna height above the local raster (m).
    #[arg(long, default_value_t = 1.5)]
    pub rx_height: f64,
    /// Carrier frequency (Hz).
    #[arg(long, default_value_t = 910e6)]
    pub frequency: f64,
    /// Ground reflection coefficient of the ground-truth generator.
    #[arg(long, default_value_t = -0.9, allow_hyphen_values = true)]
    pub reflection: f64,
    /// Random per-scenario ground-truth level offset range `lo,hi` (dB).
    #[arg(long, default_value = "0,0", allow_hyphen_values = true)]
    pub offset_db: String,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Elevation map in ASCII grid format.
    #[arg(long, requires = "tx_file")]
    pub map: Option<PathBuf>,
    /// TX positions, CSV with columns `x_m,y_m`.
    #[arg(long, requires = "map")]
    pub tx_file: Option<PathBuf>,
    /// Number of scenarios drawn from random synthetic cities.
    #[arg(long, conflicts_with = "map")]
    pub random_scenarios: Option<usize>,
    /// Samples per scenario: the unrotated one plus random rotations.
    #[arg(long, default_value_t = 1)]
    pub augment: usize,
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Output sample directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Fraction of training samples held out for a validation loss.
    #[arg(long, default_value_t = 0.0)]
    pub validation_fraction: f64,
    /// Divides every channel width of the network (1 = full size).
    #[arg(long, default_value_t = 1)]
    pub width_divisor: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub samples: PathBuf,
    /// Fraction of scenarios to train on; the rest is held out.
    #[arg(long, default_value_t = 1.0)]
    pub ratio: f64,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss history CSV (default `<out>.history.csv`).
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Predict every sample of a sample directory.
    #[arg(long, conflicts_with = "map")]
    pub samples: Option<PathBuf>,
    /// Predict the tile around `--tx` on an elevation map.
    #[arg(long, requires = "tx")]
    pub map: Option<PathBuf>,
    /// TX position `x,y` in map metres.
    #[arg(long, allow_hyphen_values = true)]
    pub tx: Option<String>,
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Print per-tile latency in milliseconds.
    #[arg(long)]
    pub time: bool,
    /// Output directory for PNG renderings.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Samples whose targets are the ground truth.
    #[arg(long)]
    pub samples: PathBuf,
    /// Model to evaluate, reported next to the rough-estimate baseline.
    #[arg(long, conflicts_with = "pred")]
    pub model: Option<PathBuf>,
    /// Sample directory whose targets are taken as predictions.
    #[arg(long, required_unless_present = "model")]
    pub pred: Option<PathBuf>,
    /// Evaluate only the scenarios held out by `train --ratio` with the
    /// same seed.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Output directory for the JSON report and ECDF CSVs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub samples: PathBuf,
    /// Comma-separated split ratios (default 0.1 to 0.9).
    #[arg(long)]
    pub ratios: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Output CSV table.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SoundArgs {
    /// IQ capture (interleaved f32 LE) with its `.json` sidecar.
    #[arg(long)]
    pub iq: PathBuf,
    /// GPS log CSV `t_unix_s,lat_deg,lon_deg`.
    #[arg(long)]
    pub gps: PathBuf,
    /// Calibration JSON.
    #[arg(long)]
    pub cal: PathBuf,
    /// Chip rate in Hz (default: half the capture sample rate).
    #[arg(long)]
    pub chip_rate: Option<f64>,
    /// Odd moving-average window in seconds (1 = none).
    #[arg(long, default_value_t = 1)]
    pub window: usize,
    /// Output trace CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Pretrained model.
    #[arg(long)]
    pub model: PathBuf,
    /// Measurement-like samples.
    #[arg(long)]
    pub samples: PathBuf,
    /// Fraction of scenarios kept out of fine-tuning.
    #[arg(long, default_value_t = 0.9)]
    pub holdout: f64,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Output directory for the tuned model and reports.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

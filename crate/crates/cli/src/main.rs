mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;

/// RRAM ternary neural network simulator: device, sense amplifier, array,
/// training and fault-injection experiments with CSV output.
#[derive(Debug, Parser)]
#[command(name = "tnnsim", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Experiment configuration file (TOML). Built-in defaults otherwise.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory for output files.
    #[arg(long, global = true, env = "TNNSIM_OUT_DIR", default_value = "out")]
    pub out_dir: PathBuf,
    /// Supply voltage (V), overriding `pcsa.vdd`.
    #[arg(long, global = true)]
    pub vdd: Option<f64>,
    /// Sense window (ns). Overrides the sweep window for `sense-sweep`, the
    /// slow-cell threshold for `map` and the read window otherwise.
    #[arg(long, global = true)]
    pub window_ns: Option<f64>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Fit sense amplifier parameters to the configured anchors.
    Calibrate,
    /// Switching-time maps over a resistance grid at 0.6 V and 1.2 V.
    Map {
        /// Grid points per axis.
        #[arg(long)]
        points: Option<usize>,
    },
    /// Convergence probability against a fixed BLb resistance.
    SenseSweep {
        /// Sense operations per resistance.
        #[arg(long)]
        trials: Option<usize>,
        /// BLb resistance (ohm).
        #[arg(long)]
        r_blb: Option<f64>,
    },
    /// Train a network and export its integer inference model.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        /// `tnn` or `bnn`.
        #[arg(long)]
        mode: Option<String>,
        /// Hidden blocks, e.g. `d512,d512`.
        #[arg(long)]
        arch: Option<String>,
    },
    /// Clean test accuracy of a model file.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Accuracy under injected weight errors over a range of error rates.
    InjectSweep {
        #[arg(long)]
        model: PathBuf,
        /// Corruptions per error rate.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Accuracy with weights stored in and read back from simulated arrays.
    ArrayEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::Map { .. } => "map",
            Command::SenseSweep { .. } => "sense-sweep",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::InjectSweep { .. } => "inject-sweep",
            Command::ArrayEval { .. } => "array-eval",
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Folds command-line overrides into the file configuration.
fn effective_config(global: &GlobalArgs, command: &Command) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(global.config.as_deref())?;
    if let Some(v) = global.vdd {
        cfg.pcsa.vdd = v;
    }
    if let Some(w) = global.window_ns {
        match command {
            Command::SenseSweep { .. } => cfg.array.sweep_window_ns = w,
            Command::Map { .. } => cfg.array.map_slow_ns = w,
            _ => cfg.array.read_window_ns = w,
        }
    }
    match command {
        Command::Map { points: Some(n) } => cfg.array.map_points = *n,
        Command::SenseSweep { trials, r_blb } => {
            if let Some(t) = trials {
                cfg.array.sweep_trials = *t;
            }
            if let Some(r) = r_blb {
                cfg.array.sweep_r_blb = *r;
            }
        }
        Command::Train { epochs, mode, arch } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(m) = mode {
                cfg.train.mode = match m.as_str() {
                    "tnn" => tnnsim_train::Mode::Tnn,
                    "bnn" => tnnsim_train::Mode::Bnn,
                    other => anyhow::bail!("unknown mode {other:?} (expected tnn or bnn)"),
                };
            }
            if let Some(a) = arch {
                cfg.train.arch = a.clone();
            }
        }
        Command::InjectSweep { runs: Some(r), .. } => cfg.faults.runs = *r,
        Command::ArrayEval { runs: Some(r), .. } => cfg.array.runs = *r,
        _ => {}
    }
    cfg.train.seed = global.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// A configuration problem only detected while running a command.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<ConfigError>()
            || matches!(e.downcast_ref::<tnnsim_core::Error>(), Some(tnnsim_core::Error::Config(_)))
            || matches!(
                e.downcast_ref::<tnnsim_train::Error>(),
                Some(tnnsim_train::Error::Config(_) | tnnsim_train::Error::Core(tnnsim_core::Error::Config(_)))
            )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match effective_config(&cli.global, &cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("tnnsim: configuration error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match commands::run(&cli.global, &cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tnnsim: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

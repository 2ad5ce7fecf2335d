//! Experiment harness: dataset generation, source training, adaptation,
//! evaluation, and multi-seed sweeps over a structured config file.
//!
//! Every run is a pure function of its config and seed; repeating a command
//! reproduces its artifacts bit for bit. Pipeline stages reuse artifacts
//! already present in the output directory (datasets, source model,
//! generator), so one source model can serve many adaptation runs.

mod config;
mod pipeline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use protoadapt::Error;

/// Exit codes: 2 config/parse trouble, 3 precondition violations, 4 numeric
/// failures, 1 anything else.
fn exit_code_for(err: &CliError) -> u8 {
    match err {
        CliError::Config(_) => 2,
        CliError::Core(Error::Parse { .. }) => 2,
        CliError::Core(Error::InvalidArgument(_))
        | CliError::Core(Error::InvalidState(_))
        | CliError::Core(Error::DegenerateInput(_))
        | CliError::Core(Error::InvalidBatch(_)) => 3,
        CliError::Core(Error::Numeric(_)) => 4,
        CliError::Core(Error::Io(_)) => 1,
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<String> for CliError {
    fn from(msg: String) -> Self {
        CliError::Config(msg)
    }
}

#[derive(Parser)]
#[command(
    name = "protoadapt",
    about = "Source-free domain adaptation experiments over synthetic shifted domains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source/target dataset pair described by the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the source model (generating datasets first if missing).
    TrainSource {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a full adaptation (reusing artifacts already in the output dir).
    Adapt {
        /// Adaptation variant: cpga or tcpga.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a serialized model bundle on a CSV dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Class count of the dataset.
        #[arg(long)]
        classes: usize,
    },
    /// Run the cartesian product of methods x shifts x ratios x seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: cpga,tcpga
        #[arg(long, default_value = "cpga,tcpga")]
        methods: String,
        /// Comma-separated source-target pairs, e.g. FLT-BLT,BLT-FLT
        #[arg(long, default_value = "FLT-BLT")]
        shifts: String,
        /// Comma-separated imbalance ratios.
        #[arg(long, default_value = "100")]
        mu: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let dir = cfg.resolve_out_dir(out.as_deref());
            pipeline::ensure_datasets(&cfg, &dir)?;
            println!("datasets written under {}", dir.display());
            Ok(())
        }
        Command::TrainSource { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let dir = cfg.resolve_out_dir(out.as_deref());
            pipeline::ensure_source_model(&cfg, &dir)?;
            println!("source model written under {}", dir.display());
            Ok(())
        }
        Command::Adapt { method, config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let dir = cfg.resolve_out_dir(out.as_deref());
            let method = pipeline::parse_method(
                method.as_deref().or(cfg.stage2.method.as_deref()).unwrap_or("cpga"),
            )?;
            let summary = pipeline::run_adaptation(&cfg, &dir, method)?;
            println!("{summary}");
            Ok(())
        }
        Command::Eval { model, data, classes } => {
            let line = pipeline::evaluate(&model, &data, classes)?;
            println!("{line}");
            Ok(())
        }
        Command::Sweep { config, methods, shifts, mu, seeds, out } => {
            let cfg = load_config(&config, None)?;
            let dir = cfg.resolve_out_dir(out.as_deref());
            let methods = parse_list(&methods, pipeline::parse_method)?;
            let shifts = parse_list(&shifts, pipeline::parse_shift)?;
            let ratios = parse_list(&mu, |s| {
                s.parse::<f64>().map_err(|_| CliError::Config(format!("bad ratio {s:?}")))
            })?;
            let seed_list = parse_list(&seeds, |s| {
                s.parse::<u64>().map_err(|_| CliError::Config(format!("bad seed {s:?}")))
            })?;
            pipeline::run_sweep(&cfg, &dir, &methods, &shifts, &ratios, &seed_list)?;
            println!("sweep summary written under {}", dir.display());
            Ok(())
        }
    }
}

fn load_config(path: &Path, seed_flag: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path).map_err(CliError::Config)?;
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_list<T>(
    text: &str,
    parse: impl Fn(&str) -> Result<T, CliError>,
) -> Result<Vec<T>, CliError> {
    let items: Vec<T> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(&parse)
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(CliError::Config(format!("empty list {text:?}")));
    }
    Ok(items)
}

mod access;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

/// Errors split by exit code: usage/config problems exit 2, failures inside
/// the numerical pipeline exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(kspod::Error),
}

impl From<kspod::Error> for CliError {
    fn from(e: kspod::Error) -> Self {
        CliError::Domain(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Domain(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "kspod", version, about = "Kernel-smoothed POD flowfield emulator")]
struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a sliced Latin hypercube design on the unit cube as CSV.
    Design(DesignArgs),
    /// Write one synthetic snapshot dataset per design row.
    Synth(SynthArgs),
    /// Train an emulator from every `*.kspd` file in a directory.
    Train(TrainArgs),
    /// Emulate the field at a new physical design point.
    Predict(PredictArgs),
    /// Compare an emulated dataset against its reference and write a JSON report.
    Eval(EvalArgs),
    /// Design, synthesize, train, predict held-out points and evaluate.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct DesignArgs {
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    slices: Option<usize>,
    #[arg(long)]
    per_slice: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Design CSV on the unit cube.
    #[arg(long)]
    design: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    energy_threshold: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated physical design vector.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    design: Option<Vec<f64>>,
    /// Comma-separated snapshot indices; all snapshots by default.
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    sim: PathBuf,
    #[arg(long)]
    emu: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Directory that relative paths in the configuration resolve against.
    #[arg(long)]
    workdir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("KSPOD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("KSPOD_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Design(a) => {
            override_opt(&mut cfg.design.dims, a.dims);
            override_opt(&mut cfg.design.slices, a.slices);
            override_opt(&mut cfg.design.per_slice, a.per_slice);
            override_opt(&mut cfg.seed, a.seed);
            override_opt(&mut cfg.paths.design, a.out);
            commands::design(&cfg)
        }
        Command::Synth(a) => {
            override_opt(&mut cfg.paths.design, a.design);
            override_opt(&mut cfg.paths.dataset_dir, a.out_dir);
            commands::synth(&cfg).map(|_| ())
        }
        Command::Train(a) => {
            override_opt(&mut cfg.paths.dataset_dir, a.data_dir);
            override_opt(&mut cfg.paths.model, a.model);
            override_opt(&mut cfg.pod.energy_threshold, a.energy_threshold);
            if a.rank.is_some() {
                cfg.pod.rank = a.rank;
            }
            commands::train(&cfg)
        }
        Command::Predict(a) => {
            override_opt(&mut cfg.paths.model, a.model);
            if a.design.is_some() {
                cfg.predict.design = a.design;
            }
            if a.times.is_some() {
                cfg.predict.time_indices = a.times;
            }
            commands::predict(&cfg, &a.out)
        }
        Command::Eval(a) => {
            override_opt(&mut cfg.paths.report, a.report);
            if a.threshold.is_some() {
                cfg.metrics.threshold = a.threshold;
            }
            commands::eval(&cfg, &a.sim, &a.emu)
        }
        Command::Pipeline(a) => {
            override_opt(&mut cfg.seed, a.seed);
            let root = a.workdir.unwrap_or_else(|| PathBuf::from("."));
            commands::pipeline(&cfg, &root)
        }
    }
}

fn override_opt<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kspod: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Domain(_) => 1,
            })
        }
    }
}

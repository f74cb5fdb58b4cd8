//! Batch front end.
//!
//! `trendlab run <config>` executes ingest → denoise → split → train →
//! evaluate for every `[[run]]` in the config and then writes the combined
//! report. `denoise`, `train`, `evaluate` and `report` run one stage each
//! on the artifacts of the previous stage.
//!
//! Exit codes: 0 success, 1 runtime or dependency failure, 2 usage or
//! configuration error.

pub mod artifacts;
pub mod config;
pub mod stages;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::wavelet::Padding;
use config::{ExperimentConfig, Overrides, RunConfig};

#[derive(Debug, Error, PartialEq)]
pub enum CliError {
    /// Bad arguments, unreadable or invalid configuration, missing inputs.
    #[error("{0}")]
    Usage(String),
    /// An upstream artifact is missing or was produced from other settings.
    #[error("{0}")]
    Dependency(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Dependency(_) | CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "trendlab", version, about = "Wavelet-denoised stock trend forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every stage for each run in the config, then write report.md.
    Run(StageArgs),
    /// Ingest the dataset and write denoised.csv and noise.csv.
    Denoise(StageArgs),
    /// Fit the model on denoised.csv and write the checkpoint.
    Train(StageArgs),
    /// Score the checkpoint (or naive baseline) against the original series.
    Evaluate(StageArgs),
    /// Collect every run's evaluation under a directory into report.md.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct StageArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Seed for every run, replacing the config's.
    #[arg(long)]
    seed: Option<u64>,
    /// Runs executed concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output root; run artifacts go to <out-dir>/<run name>/.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Restrict to the named run (repeatable).
    #[arg(long = "run", value_name = "NAME")]
    runs: Vec<String>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    /// Window length for the xLSTM-TS, TCN and naive stages.
    #[arg(long)]
    sequence_length: Option<usize>,
    /// Wavelet decomposition depth.
    #[arg(long)]
    levels: Option<usize>,
    /// Boundary extension: symmetric, periodic or zero.
    #[arg(long)]
    padding: Option<Padding>,
    /// Detail levels set to zero, comma separated (1 = finest).
    #[arg(long, value_delimiter = ',')]
    zeroed_levels: Option<Vec<usize>>,
}

impl StageArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            jobs: self.jobs,
            out_dir: self.out_dir.clone(),
            runs: self.runs.clone(),
            max_epochs: self.max_epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            patience: self.patience,
            sequence_length: self.sequence_length,
            levels: self.levels,
            padding: self.padding,
            zeroed_levels: self.zeroed_levels.clone(),
        }
    }
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory holding run subdirectories.
    #[arg(default_value = "out")]
    dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Denoise,
    Train,
    Evaluate,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Denoise => "denoise",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
        }
    }
}

fn run_stages(run: &RunConfig, out_dir: &Path, stages: &[Stage], exec: Execution) -> Result<(), CliError> {
    let dir = artifacts::run_dir(out_dir, &run.name);
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    artifacts::write(&dir, artifacts::INCOMPLETE, "in progress\n")?;
    for &stage in stages {
        let result = match stage {
            Stage::Denoise => stages::denoise_stage(run, &dir),
            Stage::Train => stages::train_stage(run, &dir, exec).map(|_| ()),
            Stage::Evaluate => stages::evaluate_stage(run, &dir, exec).map(|_| ()),
        };
        if let Err(e) = result {
            artifacts::write(
                &dir,
                artifacts::INCOMPLETE,
                &format!("stage {} failed: {e}\n", stage.name()),
            )?;
            return Err(e);
        }
    }
    artifacts::remove(&dir, artifacts::INCOMPLETE)
}

/// Executes `stages` for every run, up to `jobs` at once.
fn run_all(cfg: &ExperimentConfig, stages: &[Stage]) -> Result<(), CliError> {
    // Kernels are bit-identical in both modes; threads go to runs when
    // several execute at once and to each run's kernels otherwise.
    let concurrent = cfg.jobs.min(cfg.runs.len());
    let (outer, inner) = if concurrent > 1 {
        (Execution::Parallel, Execution::Sequential)
    } else {
        (Execution::Sequential, Execution::Parallel)
    };
    let results = exec::with_jobs(cfg.jobs, || {
        exec::map(outer, &cfg.runs, |run| run_stages(run, &cfg.out_dir, stages, inner))
    });
    let mut first = None;
    for (run, r) in cfg.runs.iter().zip(results) {
        if let Err(e) = r {
            eprintln!("trendlab: run {:?}: {e}", run.name);
            first.get_or_insert(e);
        }
    }
    first.map_or(Ok(()), Err)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let (args, stages): (&StageArgs, &[Stage]) = match &cli.command {
        Command::Run(a) => (a, &[Stage::Denoise, Stage::Train, Stage::Evaluate]),
        Command::Denoise(a) => (a, &[Stage::Denoise]),
        Command::Train(a) => (a, &[Stage::Train]),
        Command::Evaluate(a) => (a, &[Stage::Evaluate]),
        Command::Report(a) => {
            print!("{}", stages::report_stage(&a.dir)?);
            return Ok(());
        }
    };
    let cfg = ExperimentConfig::load(&args.config, &args.overrides())?;
    run_all(&cfg, stages)?;
    if let Command::Run(_) = cli.command {
        print!("{}", stages::report_stage(&cfg.out_dir)?);
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("trendlab: error: {e}");
            e.exit_code()
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fluctoscope::io::write_json;
use fluctoscope::{Error, Result};
use fluctoscope_cli::commands;
use fluctoscope_cli::config::{Flags, RunConfig};
use fluctoscope_cli::report::{ErrorReport, REPORT_VERSION};

/// Super-resolution reconstruction of blinking-fluorophore image stacks.
#[derive(Parser, Debug)]
#[command(name = "fluctoscope", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset with ground truth.
    Simulate {
        #[command(flatten)]
        flags: Flags,
    },
    /// Estimate support, noise variance, intensity and background from a stack.
    Reconstruct {
        /// Stack file, or a directory written by `simulate`.
        input: PathBuf,
        /// Output directory (or use --out).
        output: Option<PathBuf>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Score a reconstruction against simulated ground truth.
    Evaluate {
        /// Directory written by `reconstruct`.
        reconstruction: PathBuf,
        /// Directory written by `simulate`.
        truth: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Print the smallest regularization weight giving an all-zero support.
    LambdaMax {
        /// Stack file, or a directory written by `simulate`.
        input: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Simulate, reconstruct and evaluate in one go.
    Pipeline {
        #[command(flatten)]
        flags: Flags,
    },
}

impl Command {
    fn flags(&self) -> &Flags {
        match self {
            Command::Simulate { flags }
            | Command::Reconstruct { flags, .. }
            | Command::Evaluate { flags, .. }
            | Command::LambdaMax { flags, .. }
            | Command::Pipeline { flags } => flags,
        }
    }

    /// Directory that receives outputs, and `error.json` on failure.
    fn out_dir(&self) -> Option<PathBuf> {
        let flags = self.flags();
        match self {
            Command::Reconstruct { output, .. } => output.clone().or_else(|| flags.out.clone()),
            Command::Evaluate { reconstruction, .. } => flags.out.clone().or_else(|| Some(reconstruction.clone())),
            _ => flags.out.clone(),
        }
    }
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf> {
    out.ok_or_else(|| Error::Config("an output directory is required (--out)".into()))
}

fn run(cmd: &Command) -> Result<()> {
    let cfg = RunConfig::resolve(cmd.flags())?;
    if let Some(n) = cfg.thread_count()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let out = cmd.out_dir();
    match cmd {
        Command::Simulate { .. } => {
            commands::cmd_simulate(&cfg.simulation, &require_out(out)?)?;
        }
        Command::Reconstruct { input, .. } => {
            commands::cmd_reconstruct(&cfg, input, &require_out(out)?, None)?;
        }
        Command::Evaluate { reconstruction, truth, .. } => {
            let doc = commands::cmd_evaluate(&cfg, reconstruction, truth, &require_out(out)?)?;
            println!("{}", serde_json::to_string_pretty(&doc.metrics)?);
        }
        Command::LambdaMax { input, .. } => {
            let report = commands::cmd_lambda_max(&cfg, input)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_json(&dir.join("lambda_max.json"), &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Pipeline { .. } => {
            let report = commands::cmd_pipeline(&cfg, &require_out(out)?)?;
            println!("{}", serde_json::to_string_pretty(&report.metrics)?);
        }
    }
    Ok(())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension { .. } => "dimension",
        Error::Precondition(_) => "precondition",
        Error::Capacity(_) => "capacity",
        Error::UnsupportedRegularizer(_) => "unsupported_regularizer",
        Error::SolverFailure { .. } => "solver_failure",
        Error::FlatDerivative { .. } => "flat_derivative",
        Error::UndefinedPeak => "undefined_peak",
        Error::DivisionByZero(_) => "division_by_zero",
        Error::Config(_) => "config",
        Error::Format { .. } => "format",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn write_error(dir: &Path, e: &Error) {
    let report = ErrorReport {
        version: REPORT_VERSION,
        kind: error_kind(e).into(),
        message: e.to_string(),
        solver_failure: e.is_solver_failure(),
    };
    let written = std::fs::create_dir_all(dir).map_err(Error::from).and_then(|_| write_json(&dir.join("error.json"), &report));
    if let Err(w) = written {
        log::error!("could not write error report to {}: {w}", dir.display());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            if let Some(dir) = cli.command.out_dir() {
                write_error(&dir, &e);
            }
            ExitCode::from(if e.is_solver_failure() { 3 } else { 1 })
        }
    }
}

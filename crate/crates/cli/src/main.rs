//! `insens`: synthesize insensitizing controls and run diagnostics.
//!
//! Exit codes: 0 success, 2 invalid configuration or violated assumption,
//! 3 small-data regime exceeded, 4 ill-conditioned least-squares solve,
//! 5 internal or i/o error.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use insens_core::scenario::ScenarioSpec;

use commands::{cmd_diagnose, cmd_sweep, cmd_synthesize, Diagnostic, Outcome, SweepParam};
use config::{DiagnosticsConfig, InsensitivityConfig, RunConfig};
use error::{category_label, CliError};
use output::{resolve_out_dir, OutDir};

/// Default resolution when no configuration file is given.
const DEFAULT_CELLS: usize = 32;
const DEFAULT_STEPS: usize = 64;

#[derive(Debug, Parser)]
#[command(
    name = "insens",
    version,
    about = "Insensitizing controls for a quasilinear reaction-diffusion equation with dynamic boundary conditions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML configuration file. Without it, the reference scenario at
    /// N = 32, M = 64 with a zero source is used.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $INSENS_OUT_DIR, then ./insens-out).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the control, verify the cascade and check insensitivity.
    Synthesize(RunArgs),
    /// Run one numerical diagnostic.
    Diagnose {
        /// Which diagnostic.
        #[arg(value_enum)]
        which: Diagnostic,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Repeat the synthesis over a list of parameter values.
    Sweep {
        /// Parameter to vary.
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_negative_numbers = true
        )]
        values: Vec<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
}

fn load(args: &RunArgs) -> Result<(RunConfig, OutDir), CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig {
            seed: 0,
            scenario: ScenarioSpec::reference(DEFAULT_CELLS, DEFAULT_STEPS),
            source: insens_core::sources::SourceSpec::zero(),
            initial_amplitude: 0.0,
            insensitivity: InsensitivityConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        },
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = OutDir::create(resolve_out_dir(args.out.as_deref()))?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Synthesize(args) => {
            let (cfg, out) = load(&args)?;
            cmd_synthesize(&cfg, &out)
        }
        Command::Diagnose { which, run } => {
            let (cfg, out) = load(&run)?;
            cmd_diagnose(&cfg, which, &out)
        }
        Command::Sweep { param, values, run } => {
            let (cfg, out) = load(&run)?;
            cmd_sweep(&cfg, param, &values, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            ExitCode::from(outcome.exit_code)
        }
        Err(e) => {
            eprintln!(
                "error ({}; {} contract): {e}",
                category_label(e.category()),
                e.contract()
            );
            ExitCode::from(e.exit_code())
        }
    }
}

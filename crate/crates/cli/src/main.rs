//! `ddss`: pre-train a toy diffusion model, search samplers, sample, evaluate
//! and plot.

mod commands;
mod config;
mod plot;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Command, Overrides, RunConfig};

/// Invalid configuration or arguments (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// Malformed input file (exit code 4).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct FormatError(pub String);

#[derive(Parser)]
#[command(name = "ddss", version, about = "Differentiable sampler search for diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train the score network; writes model.ckpt and train_loss.csv.
    Train(Overrides),
    /// Search sampler parameters; writes sampler_{best,final}.ckpt and trace.csv.
    Search(Overrides),
    /// Draw samples; writes samples.csv (and trajectory.csv).
    Sample {
        #[command(flatten)]
        overrides: Overrides,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        /// Searched sampler checkpoint.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Evaluate samplers; writes report.csv.
    Eval(Overrides),
    /// Render scatter panels; writes samples.svg.
    Plot {
        #[command(flatten)]
        overrides: Overrides,
        /// Sample CSV to plot; repeat for more panels.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        /// Reference CSV shown in the first panel.
        #[arg(long)]
        real: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Cmd::Train(o) => commands::train(&RunConfig::resolve(&o, Command::Train)?),
        Cmd::Search(o) => commands::search(&RunConfig::resolve(&o, Command::Search)?),
        Cmd::Sample { overrides, n, params } => {
            let c = RunConfig::resolve_with(&overrides, Command::Sample, |c| {
                if let Some(n) = n {
                    c.sample.n = n;
                }
                if params.is_some() {
                    c.sample.params = params;
                }
            })?;
            commands::sample(&c)
        }
        Cmd::Eval(o) => commands::eval(&RunConfig::resolve(&o, Command::Eval)?),
        Cmd::Plot {
            overrides,
            inputs,
            real,
        } => {
            let c = RunConfig::resolve_with(&overrides, Command::Plot, |c| {
                if !inputs.is_empty() {
                    c.plot.inputs = inputs;
                }
                if real.is_some() {
                    c.plot.real = real;
                }
            })?;
            commands::plot(&c)
        }
    }
}

/// Exit-code contract: 0 success, 2 configuration, 3 schedule fingerprint
/// mismatch, 4 I/O or format, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if cause.is::<FormatError>() || cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<ddss::Error>() {
            return match e {
                ddss::Error::FingerprintMismatch { .. } => 3,
                ddss::Error::Io(_) | ddss::Error::Format(_) => 4,
                ddss::Error::Usage(_) | ddss::Error::Initialization { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

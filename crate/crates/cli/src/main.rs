use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use consistent_attention::Error;

mod commands;
mod config;
mod records;

use config::Overrides;

/// A bad flag or configuration value.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "catn", version, about = "Consistent multi-layer attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file
    Synth(Invocation),
    /// Train one model variant
    Train(Invocation),
    /// Project a pair of attention maps onto the consistent set
    Project(Invocation),
    /// Closed-form dual witness of a pair of attention maps
    Witness(Invocation),
    /// Compute attribution records for a dataset
    Attribute(Invocation),
    /// Pixel-removal curve of stored attributions
    Perturb(Invocation),
    /// Segmentation scores of stored attributions
    Eval(Invocation),
    /// Mean and standard deviation across run directories
    Report(Invocation),
}

#[derive(Args)]
struct Invocation {
    /// JSON configuration file; flags override its keys
    #[arg(long = "config")]
    config_file: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() || cause.is::<clap::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidInput(_) | Error::Shape(_) | Error::InfeasibleSupport(_) => 2,
                Error::NoConvergence { .. } | Error::NonFinite(_) => 3,
                Error::Format(_) | Error::Io(_) => 4,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, inv) = match &cli.command {
        Command::Synth(i) => ("synth", i),
        Command::Train(i) => ("train", i),
        Command::Project(i) => ("project", i),
        Command::Witness(i) => ("witness", i),
        Command::Attribute(i) => ("attribute", i),
        Command::Perturb(i) => ("perturb", i),
        Command::Eval(i) => ("eval", i),
        Command::Report(i) => ("report", i),
    };
    let result = config::resolve(inv.config_file.as_deref(), &inv.overrides).and_then(|cfg| commands::run(name, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `tms`: fit, align, classify and analyse repeated functional observations.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use tms_core::error::{Error, ErrorClass};

use commands::Command;
use config::{resolve, Overrides};

#[derive(Debug, Parser)]
#[command(name = "tms", version, about = "Timing and motion separation of repeated functional observations")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Trajectory CSV file; may be repeated.
    #[arg(short, long, global = true)]
    input: Vec<PathBuf>,
    /// Output directory; each command writes into its own subdirectory.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (overrides TMS_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_parser = ["recorded", "percentual"])]
    time_mode: Option<String>,
    /// Override any configuration key, e.g. `--set model.n_basis=15`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Cmd {
    /// Fit the mixed-effects model per condition.
    Fit,
    /// Export aligned curves, warps and templates.
    Align,
    /// Predict participants of test curves.
    Classify,
    /// Cross-validate a grid of classifiers.
    Cv,
    /// Factor analysis of aligned 3-D paths.
    Factor,
    /// Simulation study or synthetic dataset.
    Simulate,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Fit => Command::Fit,
            Cmd::Align => Command::Align,
            Cmd::Classify => Command::Classify,
            Cmd::Cv => Command::Cv,
            Cmd::Factor => Command::Factor,
            Cmd::Simulate => Command::Simulate,
        }
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn report(err: &Error) -> ExitCode {
    let class = err.class();
    let name = match class {
        ErrorClass::Config => "config",
        ErrorClass::Data => "data",
        ErrorClass::Numerical => "numerical",
    };
    let body = json!({ "error": { "class": name, "kind": err.kind(), "message": err.to_string() } });
    eprintln!("{body}");
    ExitCode::from(exit_code(class))
}

fn execute(cli: Cli) -> Result<(), Error> {
    let ov = Overrides {
        input: cli.input,
        output: cli.output,
        seed: cli.seed,
        threads: cli.threads,
        time_mode: cli.time_mode,
        set: cli.set,
    };
    let cfg = resolve(cli.config.as_deref(), &ov)?;
    if cli.print_config {
        if let Some(c) = cli.command {
            cfg.validate(Command::from(c).name())?;
        }
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let command: Command = cli
        .command
        .ok_or_else(|| Error::Config("no command given (see --help)".into()))?
        .into();
    cfg.validate(command.name())?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_threads())
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let dir = commands::run(command, &cfg)?;
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

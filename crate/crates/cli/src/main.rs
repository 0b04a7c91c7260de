mod commands;
mod config;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use carve_core::CarveError;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(
    name = "carve",
    version,
    about = "Carved selective inference after screening"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for report files.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for simulations.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Apply a selection rule and print the outcome.
    Screen(Common),
    /// Evaluate a carved pivot.
    Pivot(Common),
    /// Invert a carved pivot into a confidence interval.
    Ci(Common),
    /// Run a two-stage simulation and write CSV and JSON reports.
    Simulate(Common),
    /// Run the numerical verification checks.
    Verify(Common),
}

pub enum Failure {
    Carve(CarveError),
    Verify(String),
    Io(String),
}

impl From<CarveError> for Failure {
    fn from(e: CarveError) -> Self {
        Failure::Carve(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Carve(
            CarveError::Config(_) | CarveError::Domain(_) | CarveError::InsufficientData { .. },
        ) => 2,
        Failure::Carve(CarveError::RareEventUnderflow { .. }) => 3,
        Failure::Carve(_) | Failure::Verify(_) | Failure::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("CARVE_LOG")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Screen(c) => commands::screen(c),
        Command::Pivot(c) => commands::pivot(c),
        Command::Ci(c) => commands::ci(c),
        Command::Simulate(c) => commands::simulate(c),
        Command::Verify(c) => verify::run(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Carve(e) => e.to_string(),
                Failure::Verify(s) | Failure::Io(s) => s.clone(),
            };
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&f))
        }
    }
}

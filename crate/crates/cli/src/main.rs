//! `tttlab`: dataset generation, training, adaptation sweeps, the 1-D
//! entropy demo, ablation grids and report assembly.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 malformed config or
//! arguments, 3 missing input files.

mod commands;
mod report;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "tttlab", version, about = "Information-maximizing test-time training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `--set adapt.J=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory; defaults to the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Layers,
    K,
    Heads,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the train and test dataset dumps.
    GenData(Common),
    /// Train one model per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train only this seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt trained models to the corrupted test streams.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Source accuracy of trained models, eval-mode and batch-statistics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Equal-mass 1-D clustering entropy before and after a shift.
    Fig1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and adapt one model per grid cell.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        grid: Grid,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge result CSVs into a markdown summary.
    Report {
        /// CSV files; defaults to every CSV under `<out>/results`.
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Markdown destination; defaults to `<out>/report.md`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Missing(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Missing(m) => write!(f, "missing input: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<tttlab_core::Error> for CliError {
    fn from(e: tttlab_core::Error) -> Self {
        match e {
            tttlab_core::Error::Config(m) => CliError::Config(m),
            tttlab_core::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Missing(io.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        tttlab_core::Error::Io(e).into()
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Train { common, seed } => commands::train(&common, seed),
        Command::Adapt { common, seed } => commands::adapt(&common, seed),
        Command::Eval { common, seed } => commands::eval(&common, seed),
        Command::Fig1 { common, k, n, seed } => commands::fig1(&common, k, n, seed),
        Command::Ablate { common, grid, seed } => commands::ablate(&common, grid, seed),
        Command::Report { inputs, out, output } => report::run(&inputs, &out, output.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tttlab: {e}");
            ExitCode::from(e.code())
        }
    }
}

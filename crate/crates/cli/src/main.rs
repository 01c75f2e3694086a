use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::{RunConfig, Suite};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] mowst::Error),
    #[error("{0} verification clause(s) failed")]
    Failed(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Run(mowst::Error::Diverged { .. } | mowst::Error::Tensor(_)) => 3,
            CliError::Usage(_) | CliError::Run(_) => 2,
        }
    }
}

impl From<mowst::graph::GraphError> for CliError {
    fn from(e: mowst::graph::GraphError) -> Self {
        CliError::Run(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "mowst", version, about = "Weak/strong graph mixture-of-experts lab")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Specialization,
    Blindspot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    InTurn,
    Joint,
    Star,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic graph as interchange JSON.
    Gen {
        #[arg(long, value_enum)]
        kind: Option<GenKind>,
        /// Blindspot radius.
        #[arg(long)]
        k: Option<usize>,
        /// Feature width.
        #[arg(long)]
        f: Option<usize>,
        #[arg(long)]
        n_per_group: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a mixture; writes checkpoint.json and report CSVs.
    Train {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Predict with a trained mixture; writes predictions.csv.
    Infer {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample one expert per node instead of averaging.
        #[arg(long)]
        stochastic: bool,
    },
    /// Run the verification suites; writes theorem_report.csv.
    Verify {
        #[arg(long, value_enum)]
        suite: Option<Suite>,
        /// Blindspot graph to check instead of generated ones.
        #[arg(long, requires = "meta")]
        graph: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
    },
    /// Print the multiply-accumulate estimate per architecture.
    Cost {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        f: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.out = cli.out;
    }
    commands::dispatch(cli.command, cfg)
}

fn main() -> ExitCode {
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
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `mowst --help` for usage");
            }
            ExitCode::from(e.exit_code())
        }
    }
}

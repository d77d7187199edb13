//! `nlch` command line tool.
//!
//! Exit status: 0 success, 2 configuration error, 3 numerical failure,
//! 4 resource guard.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "nlch", version, about = "Multishape convolution operators and nonlocal Cahn-Hilliard runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `outputs.directory`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for assembly (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Operator cache file; overrides `conv.cache`.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,

    /// Seed for randomized initial states.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Assemble the convolution operator (or load it from the cache) and write the cache.
    BuildOperator,
    /// Sweep (eps, N, alpha) and tabulate the operator error against the closed form.
    Validate,
    /// Integrate the Cahn-Hilliard system and write trajectory, snapshots and diagnostics.
    Solve,
    /// Compare logarithmic and regularized dynamics after a time shift.
    Regularized,
    /// Recompute equilibrium diagnostics from the artifacts of a previous `solve`.
    Diagnostics,
}

/// Failure classes and their exit status.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical(String),
    Resource(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Resource(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
            Failure::Resource(m) => write!(f, "resource limit: {m}"),
        }
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<nlch::Error> for Failure {
    fn from(e: nlch::Error) -> Self {
        use nlch::Error as E;
        fn class(e: &E) -> u8 {
            match e {
                E::Row { source, .. } => class(source),
                E::InvalidArgument(_) | E::Format(_) | E::Io(_) => 2,
                E::Resource(_) => 4,
                E::Domain(_) | E::Geometry { .. } | E::Initialization { .. } | E::Integration { .. } => 3,
            }
        }
        let msg = e.to_string();
        match class(&e) {
            2 => Failure::Config(msg),
            4 => Failure::Resource(msg),
            _ => Failure::Numerical(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(format!("i/o: {e}"))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Config(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Config(format!("json: {e}"))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let path = cli
        .config
        .ok_or_else(|| Failure::Config("--config PATH is required".into()))?;
    let cfg = RunConfig::load(&path)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        nlch::par::init_threads(n);
    }
    let out = cli.out.unwrap_or_else(|| cfg.outputs.directory.clone());
    std::fs::create_dir_all(&out).map_err(|e| Failure::Config(format!("cannot create {}: {e}", out.display())))?;
    let ctx = Context::new(cfg, out, cli.cache, cli.seed);
    match cli.command {
        Command::BuildOperator => commands::build_operator(&ctx),
        Command::Validate => commands::validate(&ctx),
        Command::Solve => commands::solve(&ctx),
        Command::Regularized => commands::regularized(&ctx),
        Command::Diagnostics => commands::diagnostics(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("nlch: {f}");
            ExitCode::from(f.code())
        }
    }
}

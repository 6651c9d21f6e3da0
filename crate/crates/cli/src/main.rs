//! `sbv`: batch driver for projections, convergence ladders, collar
//! reflections and field energies.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;
use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "sbv", version, about = "Piecewise-affine approximation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Project the field once and dump cells and jump faces.
    Project(Common),
    /// Run the convergence ladder.
    Converge(Common),
    /// Collar reflection diagnostics for the domain.
    Reflect(Common),
    /// Energies of the field on the domain.
    Energy(Common),
    /// List field presets with example parameters.
    Catalog,
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let text = std::fs::read_to_string(&c.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", c.config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text).map_err(CliError::Config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.out.clone());
    Ok((cfg, out))
}

type Handler = fn(&ExperimentConfig, &std::path::Path) -> Result<Vec<PathBuf>, CliError>;

fn run(cli: Cli) -> Result<(), CliError> {
    let (cmd, common): (Handler, Common) = match cli.command {
        Command::Catalog => {
            print!("{}", commands::catalog_text());
            return Ok(());
        }
        Command::Project(c) => (commands::project_cmd, c),
        Command::Converge(c) => (commands::converge_cmd, c),
        Command::Reflect(c) => (commands::reflect_cmd, c),
        Command::Energy(c) => (commands::energy_cmd, c),
    };
    let (cfg, out) = load(&common)?;
    for f in cmd(&cfg, &out)? {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sbv: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

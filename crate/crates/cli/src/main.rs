use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use jumpbsde_cli::config;
use jumpbsde_cli::run::{execute, Subcommand};
use jumpbsde_cli::CliError;

/// Quadratic BSDEs with jumps and exponential utility on a lattice.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    #[arg(long, value_enum)]
    subcommand: Subcommand,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(args: &Args) -> Result<Vec<PathBuf>, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let cfg = config::parse(&text)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    execute(args.subcommand, &cfg, &out)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

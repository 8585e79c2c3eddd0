use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tieq_cli::config::Format;
use tieq_cli::run::{self, Overrides};

#[derive(Parser)]
#[command(name = "tieq", version, about = "Equilibrium strategies from the projected integral equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed for the verification sampler and Monte Carlo paths.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for the strategy table, plot data and report.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Format of the strategy table.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the problem and run the verification suite.
    Solve { config: PathBuf },
    /// Verify a previously written strategy CSV.
    Verify {
        config: PathBuf,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Brute-force reference solution on a 10x refined grid.
    Oracle { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir,
        format: cli.format,
    };
    let result = match &cli.command {
        Command::Solve { config } => run::solve(config, &overrides),
        Command::Verify { config, solution } => run::verify(config, solution, &overrides),
        Command::Oracle { config } => run::oracle(config, &overrides),
    };
    let code = match result {
        Ok(code) => {
            if code != 0 {
                eprintln!("verification failed; see the report for details");
            }
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "elapsed", version, about = "Run elapsed-time neuron model scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more scenario files.
    Run {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Scenarios run in parallel on this many threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check scenario files without running them.
    Validate {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// Print version information.
    Version,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { configs, jobs } => {
            let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
                Ok(pool) => pool,
                Err(e) => {
                    eprintln!("cannot start worker pool: {e}");
                    return ExitCode::from(2);
                }
            };
            let reports: Vec<_> = pool.install(|| configs.par_iter().map(|c| elapsed_cli::run(c)).collect());
            for r in &reports {
                match &r.error {
                    None => eprintln!("{}: ok", r.config.display()),
                    Some(e) => eprintln!("{}: {e}", r.config.display()),
                }
            }
            reports.iter().map(|r| r.exit_code).max().unwrap_or(0)
        }
        Command::Validate { configs } => configs
            .iter()
            .map(|c| match elapsed_cli::validate(c) {
                Ok(_) => {
                    eprintln!("{}: valid", c.display());
                    0
                }
                Err(e) => {
                    eprintln!("{}: {e}", c.display());
                    e.exit_code()
                }
            })
            .max()
            .unwrap_or(0),
        Command::Version => {
            println!("elapsed {} (elapsed-core {})", env!("CARGO_PKG_VERSION"), elapsed_core::VERSION);
            0
        }
    };
    ExitCode::from(code as u8)
}

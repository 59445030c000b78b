use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddot::cli::{self, RunOptions};
use ddot::Error;

#[derive(Parser)]
#[command(name = "ddot", about = "Dynamical optimal transport for discrete-time systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file
    Run {
        config: PathBuf,
        /// Also write SVG charts next to the CSV files
        #[arg(long)]
        plots: bool,
        /// Overrides `output_dir`
        #[arg(long, value_name = "PATH")]
        output_dir: Option<PathBuf>,
        /// Overrides `cp.max_iter`
        #[arg(long, value_name = "N")]
        max_iter: Option<usize>,
    },
    /// Print the version
    Version,
}

/// Sizes the global rayon pool from `DDOT_THREADS` (unset or 0 = automatic).
fn configure_threads() -> Result<(), String> {
    let threads = match std::env::var("DDOT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| format!("DDOT_THREADS must be a nonnegative integer, got `{v}`"))?,
        Err(_) => 0,
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match args.command {
        Command::Version => {
            println!("ddot {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
        Command::Run {
            config,
            plots,
            output_dir,
            max_iter,
        } => {
            if let Err(e) = configure_threads() {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            let opts = RunOptions {
                plots,
                output_dir,
                max_iter,
            };
            match cli::run(&config, &opts) {
                Ok(outcome) => {
                    for (k, v) in &outcome.summary {
                        println!("{k} = {v}");
                    }
                    println!("outputs written to {}", outcome.output_dir.display());
                    ExitCode::from(outcome.exit_code() as u8)
                }
                Err(e @ Error::Config { .. }) => {
                    eprintln!("config error: {e}");
                    ExitCode::from(1)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dvhsmooth::experiment;

/// Config-driven experiments over dose-volume objectives.
#[derive(Parser)]
#[command(name = "dvhsmooth", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its CSV/JSON outputs.
    Run {
        /// Path to the experiment config (JSON).
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Print progress to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Parse and validate a config without running it.
    Validate {
        /// Path to the experiment config (JSON).
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out_dir,
            verbose,
        } => match experiment::run_file(&config, &out_dir, verbose) {
            Ok(outcome) => {
                for f in &outcome.files {
                    println!("{}", f.display());
                }
                eprintln!("{}", outcome.summary);
                if outcome.ok {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Command::Validate { config } => match experiment::load_config(&config) {
            Ok(loaded) => {
                println!("ok: {} ({})", loaded.config.name, loaded.hash);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}

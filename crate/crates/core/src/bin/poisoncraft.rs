//! `poisoncraft <command> --config <path> [--force] [--seed N] [--out DIR]`

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use poisoncraft::pipeline::{run_experiment, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "poisoncraft", version, about = "Run one stage of a poisoning experiment")]
struct Cli {
    /// train-surrogate, craft, train-victim, evaluate, verify-prop or report
    command: Stage,
    #[arg(long)]
    config: PathBuf,
    /// Re-run even when inputs are unchanged.
    #[arg(long)]
    force: bool,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let options = RunOptions {
        force: cli.force,
        seed: cli.seed,
        out: cli.out,
    };
    match run_experiment(&cli.config, cli.command, &options) {
        Ok(outcome) => {
            if outcome.skipped {
                println!("{}: inputs unchanged, skipped (use --force to re-run)", outcome.stage);
            } else {
                println!("{}: done", outcome.stage);
            }
            for p in &outcome.outputs {
                println!("  {}", p.display());
            }
            if let Some(s) = outcome.summary {
                println!("{s}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

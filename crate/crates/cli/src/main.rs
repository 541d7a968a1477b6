use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use guide_core::Result;

mod config;
mod manifest;
mod pipeline;

use config::RunConfig;
use pipeline::Run;

/// Evidential meta-models on frozen classifiers: train, calibrate, build the
/// noise curriculum, fit the meta-model, attack and evaluate.
#[derive(Parser, Debug)]
#[command(name = "guide", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "guide.toml")]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides `threads`.
    #[arg(short, long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train the base classifier.
    TrainBase,
    /// Relevance masses, salient layers and weight maps.
    Calibrate,
    /// Corrupted views and soft targets for every training input.
    BuildCurriculum,
    /// Fit the evidential meta-model on the curriculum.
    TrainMeta,
    /// Adversarial copies of the ID test split.
    Attack,
    /// Threshold on validation data, then score the test splits.
    Evaluate,
    /// Run every stage that is missing or stale and print the report.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    let run = Run::new(cfg)?;
    let msg = match cli.command {
        Command::TrainBase => run.train_base()?,
        Command::Calibrate => run.calibrate()?,
        Command::BuildCurriculum => run.build_curriculum()?,
        Command::TrainMeta => run.train_meta()?,
        Command::Attack => run.attack()?,
        Command::Evaluate => run.evaluate()?,
        Command::Report => run.report(&mut |stage, msg| eprintln!("[{stage}] {msg}"))?,
    };
    println!("{}", msg.trim_end());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `forestnet`: train stacked forests, map them to sparse nets, fine-tune,
//! map back, and evaluate.

mod commands;
mod config;
mod error;
mod model;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "forestnet", version, about)]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, env = "FORESTNET_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a stacked forest from a config.
    TrainRf(TrainRfArgs),
    /// Map a stacked forest to a sparse net.
    Map(MapArgs),
    /// Fine-tune a net with SGD.
    Finetune(FinetuneArgs),
    /// Map a fine-tuned net back to a forest stack.
    Mapback(MapbackArgs),
    /// Write label maps for images.
    Predict(PredictArgs),
    /// Score a model on a dataset split.
    Eval(EvalArgs),
    /// Export hidden-layer activation images.
    Inspect(InspectArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Time inference of one or more models.
    Bench(BenchArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::TrainRf(a) => train_rf(a),
        Command::Map(a) => map(a),
        Command::Finetune(a) => finetune(a),
        Command::Mapback(a) => mapback(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
        Command::Synth(a) => synth(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}

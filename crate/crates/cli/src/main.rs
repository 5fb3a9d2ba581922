//! `tractfov`: generate, augment, train, classify, evaluate, convert and
//! inspect tractograms.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
//! configuration error.

mod augment;
mod classify;
mod convert;
mod evaluate;
mod gen;
mod io;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::io::{CliResult, Failure};

#[derive(Parser, Debug)]
#[command(name = "tractfov", version, about = "Field-of-view robust tractography parcellation")]
struct Cli {
    /// Master seed for every random stream of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled cohort.
    Gen(gen::GenArgs),
    /// Add cut copies of every tractogram in a split.
    Augment(augment::AugmentArgs),
    /// Train a classifier.
    Train(train::TrainArgs),
    /// Label streamlines with a trained model.
    Classify(classify::ClassifyArgs),
    /// Score predictions against true labels.
    Eval(evaluate::EvalArgs),
    /// Convert between .trk and .jsonl.
    Convert(convert::ConvertArgs),
    /// Print a header dump and statistics.
    Info(convert::InfoArgs),
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Gen(a) => gen::run(a, cli.seed),
        Command::Augment(a) => augment::run(a, cli.seed),
        Command::Train(a) => train::run(a, cli.seed),
        Command::Classify(a) => classify::run(a),
        Command::Eval(a) => evaluate::run(a),
        Command::Convert(a) => convert::run_convert(a),
        Command::Info(a) => convert::run_info(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.jobs {
        Some(0) => Err(Failure::usage("--jobs must be at least 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Failure::Runtime(e.to_string())),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

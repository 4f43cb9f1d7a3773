//! `bionet` — phantom data, two-stage training, evaluation and reports for
//! choroid segmentation on OCT B-scans.

mod commands;
mod render;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Environment variable that forces fully serial execution. Kernels are
/// deterministic for any fixed thread count; setting this pins the count
/// to one.
pub const DETERMINISTIC_ENV: &str = "BIONET_DETERMINISTIC";

#[derive(Parser)]
#[command(name = "bionet", version, about = "Choroid segmentation pipeline for OCT B-scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with exact ground truth.
    Phantom(commands::PhantomArgs),
    /// Stage 1: train the thickness regressor on ground-truth masks and
    /// freeze it.
    TrainBio(commands::TrainBioArgs),
    /// Stage 2: train segmentation networks in one ablation mode.
    Train(commands::TrainArgs),
    /// Evaluate a trained model (or a directory of predicted masks)
    /// against a dataset split.
    Eval(commands::EvalArgs),
    /// Write per-sample binary choroid masks for a dataset split.
    Predict(commands::PredictArgs),
    /// Train every requested ablation mode with matched seeds and write
    /// the comparison table, loss curves and overlay images.
    Report(commands::ReportArgs),
}

fn main() -> ExitCode {
    if std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1" || v == "true") {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(args) => commands::phantom(args),
        Command::TrainBio(args) => commands::train_bio(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Predict(args) => commands::predict(args),
        Command::Report(args) => commands::report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

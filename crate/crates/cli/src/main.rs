mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use memepair::model::ModelError;
use memepair::tensor::TensorError;
use memepair::train::TrainError;

use config::Overrides;

#[derive(Parser, Debug)]
#[command(name = "memepair", version, about = "Paired-head multimodal meme classifier toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: train/val/test splits and a vocabulary
    GenData,
    /// Train one model on `data_dir`, keeping the best-validation checkpoint
    Train,
    /// Score a dataset with a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        /// Dataset file to score
        #[arg(long)]
        input: std::path::PathBuf,
    },
    /// Average probabilities over one or more prediction files
    Ensemble {
        #[arg(required = true)]
        predictions: Vec<std::path::PathBuf>,
    },
    /// Check model gradients against finite differences on a toy configuration
    Gradcheck,
    /// Export the ROC curve of a labeled prediction file as CSV
    Roc {
        #[arg(long)]
        predictions: std::path::PathBuf,
    },
    /// gen-data, one training run per ensemble seed, eval, ensemble, roc
    Demo,
}

/// Raised when a self-check fails rather than an input being wrong.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InternalFailure(pub String);

/// 2 for broken internal invariants, 1 for everything the caller can fix.
fn exit_code(err: &anyhow::Error) -> u8 {
    let internal = err.chain().any(|e| {
        e.is::<InternalFailure>()
            || e.is::<TensorError>()
            || matches!(
                e.downcast_ref::<TrainError>(),
                Some(TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } | TrainError::Tensor(_))
            )
            || matches!(e.downcast_ref::<ModelError>(), Some(ModelError::Tensor(_)))
    });
    if internal {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command, &cli.overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

//! `qualnet`: synthesize datasets, train, evaluate, run the ablation matrix
//! and render plots. Every invocation writes into its own run directory.

mod commands;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "qualnet", version, about = "Multi-task no-reference image quality experiments")]
pub struct Cli {
    /// Experiment configuration (TOML). Defaults to the built-in toy setup.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; run directories are created inside it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Model checkpoint (eval, plot) or training state to resume (train).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Foreign corpus directory or dataset manifest for cross-set evaluation.
    #[arg(long = "cross-set", global = true)]
    pub cross_set: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Existing dataset manifest instead of synthesizing one.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the reference corpus (if needed) and the distorted dataset.
    Synth,
    /// Train on a reference-disjoint split and evaluate on the held-out part.
    Train,
    /// Evaluate a checkpoint on a dataset or, with --cross-set, a foreign set.
    Eval,
    /// Run the ablation matrix and write the results table.
    Ablate,
    /// Render score scatter plots from a report or feature-map montages.
    Plot {
        /// Evaluation report (`.json`) to plot.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Image whose feature maps are rendered (needs --checkpoint).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Number of channels per montage.
        #[arg(long, default_value_t = 8)]
        top_k: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

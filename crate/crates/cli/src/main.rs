//! `ctlab`: phantom generation, preprocessing, training, transfer
//! experiments, evaluation, annotation lint, and point-cloud export.

mod commands;
mod manifest;
mod store;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "ctlab",
    version,
    about = "CT segmentation lab: synthetic phantoms, Hounsfield-window preprocessing, a small U-Net, sequential retraining experiments, and 3D point-cloud export"
)]
pub struct Cli {
    /// Override the seed recorded in spec or plan files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Bound worker parallelism for slide-level work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Root directory for all outputs (env CTLAB_OUT overrides).
    #[arg(long, global = true, default_value = "ctlab-out")]
    pub out_dir: PathBuf,

    /// Name of the run manifest written under <out-dir>/manifests/.
    #[arg(long, global = true)]
    pub run_name: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic CT dataset from a phantom spec file.
    Phantom(commands::phantom::PhantomArgs),
    /// Turn raw volumes into model-ready sample stores and splits.
    Preprocess(commands::preprocess::PreprocessArgs),
    /// Train a U-Net from scratch on one dataset.
    Train(commands::train::TrainArgs),
    /// Continue training an existing checkpoint on another dataset.
    Retrain(commands::train::RetrainArgs),
    /// Compute per-slide metrics of a checkpoint on a dataset split.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Run a full train/retrain/test plan and emit the results matrix.
    Matrix(commands::matrix::MatrixArgs),
    /// Export a lung point cloud as CSV for external 3D viewers.
    Export3d(commands::export3d::Export3dArgs),
    /// Scan annotations for suspicious lesion components.
    Lint(commands::lint::LintArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("ctlab: error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker pool")?;
    }
    let out_dir = std::env::var_os("CTLAB_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| cli.out_dir.clone());
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;

    let ctx = commands::CommandContext {
        out_dir,
        seed_override: cli.seed,
        jobs: cli.jobs,
        run_name: cli.run_name,
    };
    match cli.command {
        Command::Phantom(args) => commands::phantom::run(&ctx, args),
        Command::Preprocess(args) => commands::preprocess::run(&ctx, args),
        Command::Train(args) => commands::train::run(&ctx, args),
        Command::Retrain(args) => commands::train::run_retrain(&ctx, args),
        Command::Evaluate(args) => commands::evaluate::run(&ctx, args),
        Command::Matrix(args) => commands::matrix::run(&ctx, args),
        Command::Export3d(args) => commands::export3d::run(&ctx, args),
        Command::Lint(args) => commands::lint::run(&ctx, args),
    }
}

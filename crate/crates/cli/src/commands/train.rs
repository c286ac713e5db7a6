use super::CommandContext;
use crate::manifest::ManifestBuilder;
use crate::store::load_split_samples;
use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use ctlab_core::segnet::{
    init_unet, load_checkpoint, save_checkpoint, train, train_log_csv, OptimizerKind, ParamSet,
    StopReason, TrainConfig, TrainLog, UNetConfig,
};
use std::path::PathBuf;

#[derive(Copy, Clone, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Clone)]
pub struct TrainHyperArgs {
    #[arg(long, default_value_t = 0.0001)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 45)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Disable per-epoch shuffling.
    #[arg(long)]
    pub no_shuffle: bool,
    /// Shuffle/batching seed.
    #[arg(long, default_value_t = 0)]
    pub train_seed: u64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
}

impl TrainHyperArgs {
    pub(crate) fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            shuffle: !self.no_shuffle,
            seed,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => OptimizerKind::Adam,
                OptimizerArg::Sgd => OptimizerKind::Sgd,
            },
        }
    }

    pub(crate) fn echo(&self, b: &mut ManifestBuilder, seed: u64) {
        b.arg("--learning-rate", self.learning_rate);
        b.arg("--batch-size", self.batch_size);
        b.arg("--max-epochs", self.max_epochs);
        b.arg("--patience", self.patience);
        if self.no_shuffle {
            b.flag("--no-shuffle");
        }
        b.arg("--train-seed", seed);
        b.arg(
            "--optimizer",
            match self.optimizer {
                OptimizerArg::Adam => "adam",
                OptimizerArg::Sgd => "sgd",
            },
        );
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset tag to train on (must be preprocessed in this out-dir).
    #[arg(long)]
    pub dataset: String,
    /// Checkpoint name written under <out-dir>/models/.
    #[arg(long)]
    pub name: String,
    /// Encoder/decoder levels.
    #[arg(long, default_value_t = 2)]
    pub net_depth: usize,
    /// Filters at the first level.
    #[arg(long, default_value_t = 8)]
    pub base_width: usize,
    /// Weight initialization seed.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    #[command(flatten)]
    pub hyper: TrainHyperArgs,
}

#[derive(Args)]
pub struct RetrainArgs {
    /// Checkpoint to resume from: a name under <out-dir>/models/ or a path.
    #[arg(long)]
    pub from: String,
    /// Dataset tag to continue training on.
    #[arg(long)]
    pub dataset: String,
    /// New checkpoint name.
    #[arg(long)]
    pub name: String,
    #[command(flatten)]
    pub hyper: TrainHyperArgs,
}

pub fn resolve_checkpoint(ctx: &CommandContext, name_or_path: &str) -> PathBuf {
    let p = PathBuf::from(name_or_path);
    if p.exists() || name_or_path.contains('/') || name_or_path.ends_with(".unet.json") {
        p
    } else {
        ctx.out_dir.join("models").join(name_or_path)
    }
}

fn finish_training(
    ctx: &CommandContext,
    b: &mut ManifestBuilder,
    name: &str,
    params: ParamSet<f32>,
    log: &TrainLog,
) -> Result<()> {
    let models = ctx.out_dir.join("models");
    std::fs::create_dir_all(&models)?;
    let base = models.join(name);
    save_checkpoint(&params, &base)?;
    let log_path = models.join(format!("{name}.log.csv"));
    std::fs::write(&log_path, train_log_csv(log))
        .with_context(|| format!("writing {}", log_path.display()))?;

    for suffix in [".unet.json", ".unet.bin"] {
        b.artifact(&ctx.out_dir, &models.join(format!("{name}{suffix}")));
    }
    b.artifact(&ctx.out_dir, &log_path);
    b.write(&ctx.out_dir, ctx.run_name.as_deref())?;

    let reason = match log.stop_reason {
        StopReason::EarlyStop => "early stopping engaged",
        StopReason::MaxEpochs => "max epochs reached",
    };
    println!(
        "train: {name}: stopped at epoch {} ({reason}), best epoch {} with validation loss {:.6}",
        log.stopped_epoch, log.best_epoch, log.best_val_loss
    );
    Ok(())
}

pub fn run(ctx: &CommandContext, args: TrainArgs) -> Result<()> {
    let data = load_split_samples(&ctx.out_dir, &args.dataset)?;
    if data.train.is_empty() || data.val.is_empty() {
        bail!("dataset {} has empty train or validation split", args.dataset);
    }
    let sample = &data.train[0];
    let config = UNetConfig {
        input_channels: sample.input_channels,
        output_channels: 2,
        depth: args.net_depth,
        base_width: args.base_width,
        image_side: sample.side,
    };
    let init_seed = ctx.seed_override.unwrap_or(args.init_seed);
    let train_seed = ctx.seed_override.unwrap_or(args.hyper.train_seed);
    let params = init_unet::<f32>(&config, init_seed)?;
    let cfg = args.hyper.to_config(train_seed);
    let (best, log) = train(params, &data.train, &data.val, &cfg)?;

    let mut b = ManifestBuilder::new("train");
    b.arg("--dataset", &args.dataset);
    b.arg("--name", &args.name);
    b.arg("--net-depth", args.net_depth);
    b.arg("--base-width", args.base_width);
    b.arg("--init-seed", init_seed);
    args.hyper.echo(&mut b, train_seed);
    ctx.global_args(&mut b);
    b.seed("init", init_seed);
    b.seed("train", train_seed);
    finish_training(ctx, &mut b, &args.name, best, &log)
}

pub fn run_retrain(ctx: &CommandContext, args: RetrainArgs) -> Result<()> {
    let from = resolve_checkpoint(ctx, &args.from);
    let params = load_checkpoint(&from)
        .with_context(|| format!("loading checkpoint {}", from.display()))?;
    let data = load_split_samples(&ctx.out_dir, &args.dataset)?;
    let train_seed = ctx.seed_override.unwrap_or(args.hyper.train_seed);
    let cfg = args.hyper.to_config(train_seed);
    // Fresh optimizer state: only the weights carry over between stages.
    let (best, log) = train(params, &data.train, &data.val, &cfg)?;

    let mut b = ManifestBuilder::new("retrain");
    b.arg("--from", &args.from);
    b.arg("--dataset", &args.dataset);
    b.arg("--name", &args.name);
    args.hyper.echo(&mut b, train_seed);
    ctx.global_args(&mut b);
    b.seed("train", train_seed);
    finish_training(ctx, &mut b, &args.name, best, &log)
}

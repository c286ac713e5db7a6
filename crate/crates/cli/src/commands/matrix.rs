use super::CommandContext;
use crate::manifest::ManifestBuilder;
use crate::store::load_split_samples;
use anyhow::{Context, Result};
use clap::Args;
use ctlab_core::segnet::{save_checkpoint, UNetConfig};
use ctlab_core::transfer::{matrix_csv, run_experiment, DatasetRegistry, ExperimentPlan};
use std::path::PathBuf;

#[derive(Args)]
pub struct MatrixArgs {
    /// Experiment plan file (JSON: train, retrains, tests, stage_epochs, seeds).
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub net_depth: usize,
    #[arg(long, default_value_t = 8)]
    pub base_width: usize,
    #[command(flatten)]
    pub hyper: super::train::TrainHyperArgs,
}

pub fn run(ctx: &CommandContext, args: MatrixArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.plan)
        .with_context(|| format!("reading plan {}", args.plan.display()))?;
    let mut plan: ExperimentPlan =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.plan.display()))?;
    if let Some(seed) = ctx.seed_override {
        plan.seeds.init = seed;
    }
    plan.validate()?;

    let mut registry = DatasetRegistry::new();
    let mut tags: Vec<&String> = std::iter::once(&plan.train_tag)
        .chain(&plan.retrain_tags)
        .chain(&plan.test_tags)
        .collect();
    tags.sort();
    tags.dedup();
    let mut sample_meta: Option<(usize, usize)> = None;
    for tag in tags {
        let splits = load_split_samples(&ctx.out_dir, tag)?;
        if let Some(first) = splits.train.first().or(splits.test.first()) {
            sample_meta = Some((first.input_channels, first.side));
        }
        registry.insert(tag.clone(), splits);
    }
    let (input_channels, side) = sample_meta.context("no samples found for plan tags")?;
    let net = UNetConfig {
        input_channels,
        output_channels: 2,
        depth: args.net_depth,
        base_width: args.base_width,
        image_side: side,
    };
    // The plan supplies per-stage max_epochs and seeds; the corresponding
    // flags only act as defaults echoed into the manifest.
    let defaults = args.hyper.to_config(args.hyper.train_seed);

    let (lineage, matrix) = run_experiment(&plan, &registry, &net, &defaults)?;

    let models = ctx.out_dir.join("models");
    std::fs::create_dir_all(&models)?;
    let mut b = ManifestBuilder::new("matrix");
    b.arg("--plan", args.plan.display());
    b.arg("--net-depth", args.net_depth);
    b.arg("--base-width", args.base_width);
    args.hyper.echo(&mut b, args.hyper.train_seed);
    ctx.global_args(&mut b);
    b.seed("init", plan.seeds.init);
    for (i, s) in plan.seeds.stages.iter().enumerate() {
        b.seed(&format!("stage{i}"), *s);
    }

    for (stage, checkpoint) in lineage.checkpoints.iter().enumerate() {
        let base = models.join(format!("{}_stage{stage}", lineage.name));
        save_checkpoint(checkpoint, &base)?;
        for suffix in [".unet.json", ".unet.bin"] {
            b.artifact(
                &ctx.out_dir,
                &models.join(format!("{}_stage{stage}{suffix}", lineage.name)),
            );
        }
    }

    let reports = ctx.out_dir.join("reports");
    std::fs::create_dir_all(&reports)?;
    let csv_path = reports.join(format!("matrix_{}.csv", lineage.name));
    let csv = matrix_csv(&matrix);
    std::fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
    b.artifact(&ctx.out_dir, &csv_path);
    b.write(&ctx.out_dir, ctx.run_name.as_deref())?;

    print!("{csv}");
    println!("matrix: wrote {}", csv_path.display());
    Ok(())
}

use super::CommandContext;
use crate::manifest::ManifestBuilder;
use crate::store::load_split_samples;
use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use ctlab_core::metrics::metrics_csv;
use ctlab_core::segnet::{evaluate_samples, load_checkpoint};

#[derive(Copy, Clone, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Checkpoint name or path.
    #[arg(long)]
    pub model: String,
    /// Dataset tag whose split is evaluated.
    #[arg(long)]
    pub dataset: String,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Binarization threshold on the lesion channel.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

pub fn run(ctx: &CommandContext, args: EvaluateArgs) -> Result<()> {
    let path = super::train::resolve_checkpoint(ctx, &args.model);
    let params =
        load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let data = load_split_samples(&ctx.out_dir, &args.dataset)?;
    let (split_name, samples) = match args.split {
        SplitArg::Train => ("train", &data.train),
        SplitArg::Val => ("val", &data.val),
        SplitArg::Test => ("test", &data.test),
    };
    if samples.is_empty() {
        bail!("dataset {} has an empty {split_name} split", args.dataset);
    }

    let (rows, flags) = evaluate_samples(&params, samples, args.threshold)?;
    let csv = metrics_csv(&rows, &flags)?;
    let reports = ctx.out_dir.join("reports");
    std::fs::create_dir_all(&reports)?;
    let model_stem = args.model.replace('/', "_");
    let out_path = reports.join(format!("{model_stem}_on_{}_{split_name}.csv", args.dataset));
    std::fs::write(&out_path, &csv).with_context(|| format!("writing {}", out_path.display()))?;

    let mut b = ManifestBuilder::new("evaluate");
    b.arg("--model", &args.model);
    b.arg("--dataset", &args.dataset);
    b.arg("--split", split_name);
    b.arg("--threshold", args.threshold);
    ctx.global_args(&mut b);
    b.artifact(&ctx.out_dir, &out_path);
    b.write(&ctx.out_dir, ctx.run_name.as_deref())?;

    // Print the aggregate line for quick reading.
    if let Some(mean) = csv.lines().last() {
        println!("evaluate: {} on {}/{split_name}: {mean}", args.model, args.dataset);
    }
    Ok(())
}

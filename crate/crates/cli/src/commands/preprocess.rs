use super::CommandContext;
use crate::manifest::ManifestBuilder;
use crate::store::{write_splits, write_store, StoredSplits};
use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use ctlab_core::preprocess::{
    filter_volume_slides, lint_annotations, samples_from_volumes, split_dataset, ChannelBank,
    DatasetManifest, FilteredSlide, Sample, SampleMode, SplitSpec, DEFAULT_MIN_COMPONENT,
};
use ctlab_core::volume::read_volume;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum LintPolicy {
    /// Report findings and continue.
    Warn,
    /// Stop on any finding.
    Abort,
    /// Skip the lint pass.
    Off,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Lesion,
    Lung,
}

#[derive(Args)]
pub struct PreprocessArgs {
    /// Dataset manifest (JSON list of {ct, lung, lesion, tag}).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Resized slide side length.
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    /// Slides in the training split.
    #[arg(long)]
    pub train_count: usize,
    /// Slides in the validation split.
    #[arg(long)]
    pub val_count: usize,
    /// Lesion share of train/val splits.
    #[arg(long, default_value_t = 0.5)]
    pub lesion_ratio: f64,
    /// Split draw seed.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Volumes held out of train/val entirely.
    #[arg(long, value_delimiter = ',')]
    pub holdout_volumes: Vec<usize>,
    /// Sample layout: lesion (4-channel) or lung (3-channel) mode.
    #[arg(long, value_enum, default_value_t = ModeArg::Lesion)]
    pub mode: ModeArg,
    /// What to do with annotation lint findings.
    #[arg(long, value_enum, default_value_t = LintPolicy::Warn)]
    pub lint: LintPolicy,
    /// Components smaller than this are flagged by lint.
    #[arg(long, default_value_t = DEFAULT_MIN_COMPONENT)]
    pub min_component: usize,
}

#[derive(Serialize)]
struct LintRecord<'a> {
    tag: &'a str,
    volume: usize,
    #[serde(flatten)]
    finding: &'a ctlab_core::preprocess::LintFinding,
}

pub fn run(ctx: &CommandContext, args: PreprocessArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    if manifest.entries.is_empty() {
        bail!("manifest {} lists no volumes", args.manifest.display());
    }
    let split_seed = ctx.seed_override.unwrap_or(args.split_seed);
    let mode = match args.mode {
        ModeArg::Lesion => SampleMode::Lesion,
        ModeArg::Lung => SampleMode::Lung,
    };
    let bank = ChannelBank::default();

    // Group per tag: samples, filtered slides, lint findings.
    let mut per_tag: BTreeMap<String, (Vec<Sample>, Vec<FilteredSlide>)> = BTreeMap::new();
    let mut lint_lines: Vec<String> = Vec::new();
    let mut finding_count = 0usize;
    let volume_indices = manifest.volume_indices();
    for (entry, volume) in manifest.entries.iter().zip(volume_indices) {
        let ct = read_volume(&entry.ct)?.into_hounsfield()?;
        let lung = read_volume(&entry.lung)?.into_mask()?;
        let lesion = read_volume(&entry.lesion)?.into_mask()?;

        if args.lint != LintPolicy::Off {
            for finding in lint_annotations(&lung, &lesion, args.min_component)? {
                finding_count += 1;
                lint_lines.push(serde_json::to_string(&LintRecord {
                    tag: &entry.tag,
                    volume,
                    finding: &finding,
                })?);
            }
        }

        // Slides with lesion pixels but no lung are dropped by the filter;
        // say so, since they hint at annotation problems.
        for z in 0..lung.header.depth {
            if lung.slide_set_count(z) == 0 && lesion.slide_set_count(z) > 0 {
                eprintln!(
                    "preprocess: {}: volume {volume} slide {z} has lesion pixels but no lung; excluded",
                    entry.tag
                );
            }
        }

        let samples =
            samples_from_volumes(&ct, &lung, &lesion, &entry.tag, volume, &bank, args.side, mode)?;
        let filtered = filter_volume_slides(&lung, &lesion, &entry.tag, volume);
        let slot = per_tag.entry(entry.tag.clone()).or_default();
        slot.0.extend(samples);
        slot.1.extend(filtered);
    }

    let mut b = ManifestBuilder::new("preprocess");
    b.arg("--manifest", args.manifest.display());
    b.arg("--side", args.side);
    b.arg("--train-count", args.train_count);
    b.arg("--val-count", args.val_count);
    b.arg("--lesion-ratio", args.lesion_ratio);
    b.arg("--split-seed", split_seed);
    if !args.holdout_volumes.is_empty() {
        let joined = args
            .holdout_volumes
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        b.arg("--holdout-volumes", joined);
    }
    b.arg(
        "--mode",
        match args.mode {
            ModeArg::Lesion => "lesion",
            ModeArg::Lung => "lung",
        },
    );
    b.arg(
        "--lint",
        match args.lint {
            LintPolicy::Warn => "warn",
            LintPolicy::Abort => "abort",
            LintPolicy::Off => "off",
        },
    );
    b.arg("--min-component", args.min_component);
    ctx.global_args(&mut b);
    b.seed("split", split_seed);

    if args.lint != LintPolicy::Off {
        let reports = ctx.out_dir.join("reports");
        std::fs::create_dir_all(&reports)?;
        let lint_path = reports.join("preprocess-lint.jsonl");
        let mut text = lint_lines.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        std::fs::write(&lint_path, text)
            .with_context(|| format!("writing {}", lint_path.display()))?;
        b.artifact(&ctx.out_dir, &lint_path);
        if finding_count > 0 {
            eprintln!(
                "preprocess: {finding_count} lint findings (see {})",
                lint_path.display()
            );
            if args.lint == LintPolicy::Abort {
                bail!("aborting on {finding_count} annotation lint findings");
            }
        }
    }

    let spec = SplitSpec {
        train_count: args.train_count,
        val_count: args.val_count,
        lesion_ratio: args.lesion_ratio,
        seed: split_seed,
        holdout_volumes: args.holdout_volumes.clone(),
    };
    for (tag, (samples, filtered)) in &per_tag {
        if samples.is_empty() {
            bail!("dataset {tag} has no slides with lung pixels");
        }
        let splits = split_dataset(filtered, &spec)?;
        // Split lists index into the store's entry order.
        let index_of: BTreeMap<_, _> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.slide_id.clone(), i))
            .collect();
        let to_indices = |ids: &[ctlab_core::preprocess::SlideId]| -> Vec<usize> {
            ids.iter().map(|id| index_of[id]).collect()
        };
        let dir = crate::store::dataset_dir(&ctx.out_dir, tag);
        let (json_path, bin_path) = write_store(&dir, tag, mode, samples)?;
        let splits_path = write_splits(
            &dir,
            &StoredSplits {
                spec: spec.clone(),
                train: to_indices(&splits.train),
                val: to_indices(&splits.val),
                test: to_indices(&splits.test),
            },
        )?;
        b.artifact(&ctx.out_dir, &json_path);
        b.artifact(&ctx.out_dir, &bin_path);
        b.artifact(&ctx.out_dir, &splits_path);
        println!(
            "preprocess: tag {tag}: {} samples (train {} / val {} / test {})",
            samples.len(),
            splits.train.len(),
            splits.val.len(),
            splits.test.len()
        );
    }

    b.write(&ctx.out_dir, ctx.run_name.as_deref())?;
    Ok(())
}

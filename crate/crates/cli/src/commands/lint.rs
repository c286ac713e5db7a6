use super::CommandContext;
use crate::manifest::ManifestBuilder;
use anyhow::{Context, Result};
use clap::Args;
use ctlab_core::preprocess::{lint_annotations, DatasetManifest, DEFAULT_MIN_COMPONENT};
use ctlab_core::volume::read_volume;
use serde::Serialize;
use std::path::PathBuf;

#[derive(Args)]
pub struct LintArgs {
    /// Dataset manifest (JSON list of {ct, lung, lesion, tag}).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Components smaller than this are flagged.
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

pub fn run(ctx: &CommandContext, args: LintArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let volume_indices = manifest.volume_indices();
    let mut lines = Vec::new();
    for (entry, volume) in manifest.entries.iter().zip(volume_indices) {
        let lung = read_volume(&entry.lung)?.into_mask()?;
        let lesion = read_volume(&entry.lesion)?.into_mask()?;
        for finding in lint_annotations(&lung, &lesion, args.min_component)? {
            lines.push(serde_json::to_string(&LintRecord {
                tag: &entry.tag,
                volume,
                finding: &finding,
            })?);
        }
    }

    let reports = ctx.out_dir.join("reports");
    std::fs::create_dir_all(&reports)?;
    let out_path = reports.join("lint.jsonl");
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(&out_path, text).with_context(|| format!("writing {}", out_path.display()))?;

    let mut b = ManifestBuilder::new("lint");
    b.arg("--manifest", args.manifest.display());
    b.arg("--min-component", args.min_component);
    ctx.global_args(&mut b);
    b.artifact(&ctx.out_dir, &out_path);
    b.write(&ctx.out_dir, ctx.run_name.as_deref())?;

    println!("lint: {} findings written to {}", lines.len(), out_path.display());
    Ok(())
}

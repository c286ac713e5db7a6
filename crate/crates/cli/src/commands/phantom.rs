use super::CommandContext;
use crate::manifest::ManifestBuilder;
use anyhow::{Context, Result};
use clap::Args;
use ctlab_core::phantom::{generate_dataset, write_dataset, PhantomSpec};
use std::path::PathBuf;

#[derive(Args)]
pub struct PhantomArgs {
    /// Phantom spec file (JSON).
    #[arg(long)]
    pub spec: PathBuf,
}

pub fn run(ctx: &CommandContext, args: PhantomArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading phantom spec {}", args.spec.display()))?;
    let mut spec: PhantomSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.spec.display()))?;
    if let Some(seed) = ctx.seed_override {
        spec.seed = seed;
    }

    let volumes = generate_dataset(&spec)?;
    let dir = crate::store::dataset_dir(&ctx.out_dir, &spec.tag).join("raw");
    std::fs::create_dir_all(&dir)?;
    let manifest = write_dataset(&volumes, &dir, &spec.tag)?;
    let manifest_path = dir.join("manifest.json");
    manifest.save(&manifest_path)?;

    // Injected-fault ground truth, for lint recall checks.
    let faults_path = dir.join("faults.json");
    let faults: Vec<_> = volumes.iter().map(|v| &v.faults).collect();
    std::fs::write(&faults_path, serde_json::to_string_pretty(&faults)?)?;

    let mut b = ManifestBuilder::new("phantom");
    b.arg("--spec", args.spec.display());
    if let Some(seed) = ctx.seed_override {
        b.arg("--seed", seed);
    }
    ctx.global_args(&mut b);
    b.seed("phantom", spec.seed);
    for entry in &manifest.entries {
        for suffix in [".ctv.json", ".ctv.raw"] {
            for base in [&entry.ct, &entry.lung, &entry.lesion] {
                let p = PathBuf::from(format!("{}{}", base.display(), suffix));
                b.artifact(&ctx.out_dir, &p);
            }
        }
    }
    b.artifact(&ctx.out_dir, &manifest_path);
    b.artifact(&ctx.out_dir, &faults_path);
    let path = b.write(&ctx.out_dir, ctx.run_name.as_deref())?;

    println!(
        "phantom: wrote {} volumes for tag {} under {} (manifest {})",
        volumes.len(),
        spec.tag,
        dir.display(),
        path.display()
    );
    Ok(())
}

use super::CommandContext;
use crate::manifest::ManifestBuilder;
use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use ctlab_core::pointcloud::{export_pointcloud, pointcloud_csv, PointSource};
use ctlab_core::preprocess::{assemble_input, resize_nn, ChannelBank, Grid};
use ctlab_core::segnet::{load_checkpoint, predict_mask};
use ctlab_core::preprocess::{Sample, SlideId};
use ctlab_core::volume::read_volume;
use std::path::PathBuf;

#[derive(Copy, Clone, ValueEnum)]
pub enum SourceArg {
    /// Window-1 normalized CT intensities.
    Ct,
    /// Radiologist lesion annotation (requires --lesion).
    Truth,
    /// Model predictions (requires --model).
    Prediction,
}

#[derive(Args)]
pub struct Export3dArgs {
    /// CT volume base path (.ctv).
    #[arg(long)]
    pub ct: PathBuf,
    /// Lung mask base path (.ctv).
    #[arg(long)]
    pub lung: PathBuf,
    #[arg(long, value_enum)]
    pub source: SourceArg,
    /// Lesion mask, for --source truth.
    #[arg(long)]
    pub lesion: Option<PathBuf>,
    /// Checkpoint name or path, for --source prediction.
    #[arg(long)]
    pub model: Option<String>,
    /// Z step per slide; defaults to the volume's slice spacing.
    #[arg(long)]
    pub spacing: Option<f64>,
    /// Drop rows whose value is zero.
    #[arg(long)]
    pub nonzero_only: bool,
    /// Output CSV name under <out-dir>/pointclouds/.
    #[arg(long)]
    pub out: String,
}

pub fn run(ctx: &CommandContext, args: Export3dArgs) -> Result<()> {
    let ct = read_volume(&args.ct)?.into_hounsfield()?;
    let lung = read_volume(&args.lung)?.into_mask()?;
    let spacing = args.spacing.unwrap_or(ct.header.slice_spacing);

    let lesion_volume = match (&args.source, &args.lesion) {
        (SourceArg::Truth, Some(path)) => Some(read_volume(path)?.into_mask()?),
        (SourceArg::Truth, None) => bail!("--source truth requires --lesion"),
        _ => None,
    };
    let predictions = match (&args.source, &args.model) {
        (SourceArg::Prediction, Some(model)) => Some(predict_volume(ctx, model, &ct, &lung)?),
        (SourceArg::Prediction, None) => bail!("--source prediction requires --model"),
        _ => None,
    };

    let source = match args.source {
        SourceArg::Ct => PointSource::Ct,
        SourceArg::Truth => PointSource::GroundTruth(lesion_volume.as_ref().unwrap()),
        SourceArg::Prediction => PointSource::Prediction(predictions.as_ref().unwrap()),
    };
    let rows = export_pointcloud(&ct, &lung, &source, spacing)?;
    let csv = pointcloud_csv(&rows, args.nonzero_only);

    let dir = ctx.out_dir.join("pointclouds");
    std::fs::create_dir_all(&dir)?;
    let out_path = dir.join(&args.out);
    std::fs::write(&out_path, &csv).with_context(|| format!("writing {}", out_path.display()))?;

    let mut b = ManifestBuilder::new("export3d");
    b.arg("--ct", args.ct.display());
    b.arg("--lung", args.lung.display());
    b.arg(
        "--source",
        match args.source {
            SourceArg::Ct => "ct",
            SourceArg::Truth => "truth",
            SourceArg::Prediction => "prediction",
        },
    );
    if let Some(lesion) = &args.lesion {
        b.arg("--lesion", lesion.display());
    }
    if let Some(model) = &args.model {
        b.arg("--model", model);
    }
    b.arg("--spacing", spacing);
    if args.nonzero_only {
        b.flag("--nonzero-only");
    }
    b.arg("--out", &args.out);
    ctx.global_args(&mut b);
    b.artifact(&ctx.out_dir, &out_path);
    b.write(&ctx.out_dir, ctx.run_name.as_deref())?;

    println!("export3d: wrote {} rows to {}", rows.len(), out_path.display());
    Ok(())
}

/// Per-slide binary predictions at volume resolution.
fn predict_volume(
    ctx: &CommandContext,
    model: &str,
    ct: &ctlab_core::volume::HounsfieldVolume,
    lung: &ctlab_core::volume::MaskVolume,
) -> Result<Vec<Vec<u8>>> {
    let path = super::train::resolve_checkpoint(ctx, model);
    let params =
        load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let side = params.config.image_side;
    let (w, h, d) = ct.header.dims();
    if w != h {
        bail!("prediction export requires square slides, volume is {w}x{h}");
    }
    let bank = ChannelBank::default();
    let mut out = Vec::with_capacity(d);
    for z in 0..d {
        let hu = resize_nn(&Grid::from_vec(h, w, ct.slide(z).to_vec()), side);
        let lung_grid = resize_nn(&Grid::from_vec(h, w, lung.slide(z).to_vec()), side);
        let input = assemble_input(&hu, &lung_grid, &bank)?;
        let plane = side * side;
        let sample = Sample {
            slide_id: SlideId {
                tag: "export".into(),
                volume: 0,
                slide: z,
            },
            side,
            input_channels: 4,
            input,
            target: {
                let mut t = vec![0.0f32; 2 * plane];
                for p in 0..plane {
                    t[plane + p] = 1.0;
                }
                t
            },
            has_lesion: false,
        };
        let mask = predict_mask(&params, &sample, 0.5)?;
        // Back to volume resolution; nearest-neighbor keeps masks binary.
        let up = resize_nn(&Grid::from_vec(side, side, mask), w);
        out.push(up.data);
    }
    Ok(out)
}

//! Checkpoint files: a JSON manifest of layer shapes next to a raw
//! little-endian f32 blob, so retraining can resume from any stage.

use super::train::TrainLog;
use super::{layer_shapes, ConvParams, LayerShape, ParamSet, Scalar, SegnetError, UNetConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: UNetConfig,
    init_seed: u64,
    dtype: String,
    layers: Vec<LayerShape>,
}

fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.to_string_lossy();
    let stem = s
        .strip_suffix(".unet.json")
        .or_else(|| s.strip_suffix(".unet.bin"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}.unet.json")),
        PathBuf::from(format!("{stem}.unet.bin")),
    )
}

fn err(path: &Path, message: impl ToString) -> SegnetError {
    SegnetError::Checkpoint {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Write `<base>.unet.json` and `<base>.unet.bin`.
pub fn save_checkpoint<T: Scalar>(params: &ParamSet<T>, base: &Path) -> Result<(), SegnetError> {
    let (json_path, bin_path) = checkpoint_paths(base);
    let manifest = CheckpointManifest {
        config: params.config,
        init_seed: params.init_seed,
        dtype: "f32".into(),
        layers: params.layers.iter().map(|l| l.shape.clone()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    fs::write(&json_path, text).map_err(|e| err(&json_path, e))?;

    let mut blob = Vec::new();
    for layer in &params.layers {
        for &w in &layer.weights {
            blob.extend_from_slice(&(w.as_f64() as f32).to_le_bytes());
        }
        for &b in &layer.bias {
            blob.extend_from_slice(&(b.as_f64() as f32).to_le_bytes());
        }
    }
    fs::write(&bin_path, blob).map_err(|e| err(&bin_path, e))
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(base: &Path) -> Result<ParamSet<f32>, SegnetError> {
    let (json_path, bin_path) = checkpoint_paths(base);
    let text = fs::read_to_string(&json_path).map_err(|e| err(&json_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| err(&json_path, e))?;
    manifest.config.validate()?;
    let expected_shapes = layer_shapes(&manifest.config);
    if manifest.layers != expected_shapes {
        return Err(err(&json_path, "layer shapes do not match the config"));
    }

    let blob = fs::read(&bin_path).map_err(|e| err(&bin_path, e))?;
    let expected_len: usize = expected_shapes
        .iter()
        .map(|s| (s.weight_len() + s.out_channels) * 4)
        .sum();
    if blob.len() != expected_len {
        return Err(err(
            &bin_path,
            format!("expected {expected_len} bytes, found {}", blob.len()),
        ));
    }

    let mut offset = 0usize;
    let mut take = |n: usize| -> Vec<f32> {
        let out = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += 4 * n;
        out
    };
    let layers = expected_shapes
        .into_iter()
        .map(|shape| {
            let weights = take(shape.weight_len());
            let bias = take(shape.out_channels);
            ConvParams {
                shape,
                weights,
                bias,
            }
        })
        .collect();
    Ok(ParamSet {
        config: manifest.config,
        init_seed: manifest.init_seed,
        layers,
    })
}

/// Render a training log as `epoch,train_loss,val_loss` rows.
pub fn train_log_csv(log: &TrainLog) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for e in &log.epochs {
        out.push_str(&format!("{},{:.8},{:.8}\n", e.epoch, e.train_loss, e.val_loss));
    }
    out
}

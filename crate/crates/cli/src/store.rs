//! On-disk sample store: a JSON index over a raw little-endian f32 blob of
//! input and target planes, plus the split lists that point into it.

use anyhow::{bail, Context, Result};
use ctlab_core::preprocess::{Sample, SampleMode, SlideId, SplitSpec};
use ctlab_core::transfer::SplitSamples;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize, Deserialize)]
pub struct StoreIndex {
    pub tag: String,
    pub side: usize,
    pub mode: SampleMode,
    pub input_channels: usize,
    pub count: usize,
    pub entries: Vec<StoreEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StoreEntry {
    pub volume: usize,
    pub slide: usize,
    pub has_lesion: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StoredSplits {
    pub spec: SplitSpec,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn dataset_dir(out_dir: &Path, tag: &str) -> PathBuf {
    out_dir.join("datasets").join(tag)
}

fn floats_per_sample(side: usize, input_channels: usize) -> usize {
    (input_channels + 2) * side * side
}

/// Write `store.json` + `store.bin` for one dataset tag.
pub fn write_store(
    dir: &Path,
    tag: &str,
    mode: SampleMode,
    samples: &[Sample],
) -> Result<(PathBuf, PathBuf)> {
    let first = samples.first().context("no samples to store")?;
    let index = StoreIndex {
        tag: tag.to_string(),
        side: first.side,
        mode,
        input_channels: first.input_channels,
        count: samples.len(),
        entries: samples
            .iter()
            .map(|s| StoreEntry {
                volume: s.slide_id.volume,
                slide: s.slide_id.slide,
                has_lesion: s.has_lesion,
            })
            .collect(),
    };
    std::fs::create_dir_all(dir)?;
    let json_path = dir.join("store.json");
    let bin_path = dir.join("store.bin");
    std::fs::write(&json_path, serde_json::to_string_pretty(&index)?)
        .with_context(|| format!("writing {}", json_path.display()))?;

    let mut blob = Vec::with_capacity(samples.len() * floats_per_sample(first.side, first.input_channels) * 4);
    for s in samples {
        for v in s.input.iter().chain(&s.target) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(&bin_path, blob).with_context(|| format!("writing {}", bin_path.display()))?;
    Ok((json_path, bin_path))
}

/// Read a full store back into samples.
pub fn read_store(dir: &Path) -> Result<(StoreIndex, Vec<Sample>)> {
    let json_path = dir.join("store.json");
    let index: StoreIndex = serde_json::from_str(
        &std::fs::read_to_string(&json_path)
            .with_context(|| format!("reading {}", json_path.display()))?,
    )?;
    let blob = std::fs::read(dir.join("store.bin"))
        .with_context(|| format!("reading {}", dir.join("store.bin").display()))?;
    let per_sample = floats_per_sample(index.side, index.input_channels);
    let expected = index.count * per_sample * 4;
    if blob.len() != expected {
        bail!(
            "sample store {} is corrupt: expected {expected} bytes, found {}",
            dir.display(),
            blob.len()
        );
    }
    let plane = index.side * index.side;
    let mut samples = Vec::with_capacity(index.count);
    for (i, entry) in index.entries.iter().enumerate() {
        let base = i * per_sample * 4;
        let floats: Vec<f32> = blob[base..base + per_sample * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let (input, target) = floats.split_at(index.input_channels * plane);
        samples.push(Sample {
            slide_id: SlideId {
                tag: index.tag.clone(),
                volume: entry.volume,
                slide: entry.slide,
            },
            side: index.side,
            input_channels: index.input_channels,
            input: input.to_vec(),
            target: target.to_vec(),
            has_lesion: entry.has_lesion,
        });
    }
    Ok((index, samples))
}

pub fn write_splits(dir: &Path, splits: &StoredSplits) -> Result<PathBuf> {
    let path = dir.join("splits.json");
    std::fs::write(&path, serde_json::to_string_pretty(splits)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Load one dataset's train/val/test samples from its store directory.
pub fn load_split_samples(out_dir: &Path, tag: &str) -> Result<SplitSamples> {
    let dir = dataset_dir(out_dir, tag);
    let (_, samples) = read_store(&dir)?;
    let splits_path = dir.join("splits.json");
    let stored: StoredSplits = serde_json::from_str(
        &std::fs::read_to_string(&splits_path)
            .with_context(|| format!("reading {}", splits_path.display()))?,
    )?;
    let pick = |ids: &[usize]| -> Result<Vec<Sample>> {
        ids.iter()
            .map(|&i| {
                samples
                    .get(i)
                    .cloned()
                    .with_context(|| format!("split index {i} out of range for tag {tag}"))
            })
            .collect()
    };
    Ok(SplitSamples {
        train: pick(&stored.train)?,
        val: pick(&stored.val)?,
        test: pick(&stored.test)?,
    })
}

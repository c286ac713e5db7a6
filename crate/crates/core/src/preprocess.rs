//! Slide preprocessing: overlapping Hounsfield windows, nearest-neighbor
//! resizing, 4-channel sample assembly, dataset splits, and annotation lint.

use crate::volume::{validate_pair, HounsfieldVolume, MaskVolume, VolumeError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("window bounds must satisfy lo < hi, got [{lo}, {hi}]")]
    BadWindow { lo: f64, hi: f64 },
    #[error("channel bank must hold exactly 3 windows, got {0}")]
    BadBankSize(usize),
    #[error("window 1 must contain windows 2 and 3: {0}")]
    BankOverlap(String),
    #[error("grid dimension mismatch: {left} vs {right}")]
    GridMismatch { left: String, right: String },
    #[error("mask grid contains non-binary value {value}")]
    NonBinary { value: u8 },
    #[error("not enough {class} slides: need {needed}, have {available}")]
    InsufficientSlides {
        class: &'static str,
        needed: usize,
        available: usize,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

/// A dense 2D grid in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width, "grid data length");
        Grid {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }
}

/// One Hounsfield interval mapped linearly onto [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lo: f64,
    pub hi: f64,
}

impl WindowSpec {
    pub fn new(lo: f64, hi: f64) -> Result<Self, PreprocessError> {
        if !(lo < hi) {
            return Err(PreprocessError::BadWindow { lo, hi });
        }
        Ok(WindowSpec { lo, hi })
    }
}

/// The three input windows. The first window must contain the other two, so
/// every voxel inside the working range lands strictly inside channel 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelBank {
    windows: [WindowSpec; 3],
}

impl ChannelBank {
    pub fn new(windows: [WindowSpec; 3]) -> Result<Self, PreprocessError> {
        let [w1, w2, w3] = windows;
        for w in [w1, w2, w3] {
            if !(w.lo < w.hi) {
                return Err(PreprocessError::BadWindow { lo: w.lo, hi: w.hi });
            }
        }
        for (label, w) in [("window 2", w2), ("window 3", w3)] {
            if w.lo < w1.lo || w.hi > w1.hi {
                return Err(PreprocessError::BankOverlap(format!(
                    "{label} [{}, {}] escapes window 1 [{}, {}]",
                    w.lo, w.hi, w1.lo, w1.hi
                )));
            }
        }
        Ok(ChannelBank { windows })
    }

    pub fn windows(&self) -> &[WindowSpec; 3] {
        &self.windows
    }
}

impl Default for ChannelBank {
    fn default() -> Self {
        ChannelBank {
            windows: [
                WindowSpec {
                    lo: -970.0,
                    hi: -150.0,
                },
                WindowSpec {
                    lo: -700.0,
                    hi: -450.0,
                },
                WindowSpec {
                    lo: -450.0,
                    hi: -150.0,
                },
            ],
        }
    }
}

/// Map a HU value into [0,1] for one window, clamping outside it.
#[inline]
pub fn window_normalize(hu: f64, w: &WindowSpec) -> f64 {
    let v = (hu - w.lo) / (w.hi - w.lo);
    v.clamp(0.0, 1.0)
}

/// Nearest-neighbor resize to an S-by-S grid using source-index truncation:
/// output(i,j) = input(floor(i*H/S), floor(j*W/S)).
pub fn resize_nn<T: Copy>(input: &Grid<T>, side: usize) -> Grid<T> {
    assert!(input.height >= 1 && input.width >= 1 && side >= 1);
    let mut data = Vec::with_capacity(side * side);
    for i in 0..side {
        let src_y = i * input.height / side;
        let row = &input.data[src_y * input.width..(src_y + 1) * input.width];
        for j in 0..side {
            data.push(row[j * input.width / side]);
        }
    }
    Grid {
        height: side,
        width: side,
        data,
    }
}

/// Identifies one slide of one volume of one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlideId {
    pub tag: String,
    pub volume: usize,
    pub slide: usize,
}

impl fmt::Display for SlideId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/v{}/s{}", self.tag, self.volume, self.slide)
    }
}

/// Whether a sample feeds the lesion model (4 input channels, lesion target)
/// or the auxiliary lung model (3 input channels, lung target).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Lesion,
    Lung,
}

/// One model-ready slide: channel-major input planes and a 2-channel
/// one-hot target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub slide_id: SlideId,
    pub side: usize,
    pub input_channels: usize,
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    pub has_lesion: bool,
}

impl Sample {
    pub fn input_plane(&self, c: usize) -> &[f32] {
        let n = self.side * self.side;
        &self.input[c * n..(c + 1) * n]
    }

    pub fn target_plane(&self, c: usize) -> &[f32] {
        let n = self.side * self.side;
        &self.target[c * n..(c + 1) * n]
    }

    /// Ground-truth positive-class mask (target channel 1).
    pub fn truth_mask(&self) -> Vec<u8> {
        self.target_plane(0).iter().map(|&v| v as u8).collect()
    }
}

/// The three windowed planes for one slide, channel-major.
pub fn assemble_windows(hu: &Grid<i16>, bank: &ChannelBank) -> Vec<f32> {
    let n = hu.height * hu.width;
    let mut out = Vec::with_capacity(3 * n);
    for w in bank.windows() {
        for &v in &hu.data {
            out.push(window_normalize(v as f64, w) as f32);
        }
    }
    out
}

/// Stack the three windowed planes plus the binary lung plane.
pub fn assemble_input(
    hu: &Grid<i16>,
    lung: &Grid<u8>,
    bank: &ChannelBank,
) -> Result<Vec<f32>, PreprocessError> {
    if hu.height != lung.height || hu.width != lung.width {
        return Err(PreprocessError::GridMismatch {
            left: format!("{}x{}", hu.height, hu.width),
            right: format!("{}x{}", lung.height, lung.width),
        });
    }
    check_binary_grid(lung)?;
    let mut out = assemble_windows(hu, bank);
    out.extend(lung.data.iter().map(|&v| v as f32));
    Ok(out)
}

/// One-hot target: channel 1 marks the positive class, channel 2 its complement.
pub fn assemble_target(positive: &Grid<u8>) -> Result<Vec<f32>, PreprocessError> {
    check_binary_grid(positive)?;
    let n = positive.height * positive.width;
    let mut out = Vec::with_capacity(2 * n);
    out.extend(positive.data.iter().map(|&v| v as f32));
    out.extend(positive.data.iter().map(|&v| 1.0 - v as f32));
    Ok(out)
}

fn check_binary_grid(grid: &Grid<u8>) -> Result<(), PreprocessError> {
    if let Some(&value) = grid.data.iter().find(|&&v| v > 1) {
        return Err(PreprocessError::NonBinary { value });
    }
    Ok(())
}

/// Paths of one CT/lung/lesion triple plus its dataset tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub ct: PathBuf,
    pub lung: PathBuf,
    pub lesion: PathBuf,
    pub tag: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        let text = std::fs::read_to_string(path).map_err(|e| PreprocessError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| PreprocessError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PreprocessError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialization");
        std::fs::write(path, text).map_err(|e| PreprocessError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Per-tag volume index of each entry, in manifest order.
    pub fn volume_indices(&self) -> Vec<usize> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        self.entries
            .iter()
            .map(|e| {
                let c = counts.entry(e.tag.as_str()).or_insert(0);
                let idx = *c;
                *c += 1;
                idx
            })
            .collect()
    }
}

/// A slide that survived lung filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredSlide {
    pub slide_id: SlideId,
    pub has_lesion: bool,
}

/// Retain the slides of one volume pair that contain lung pixels.
pub fn filter_volume_slides(
    lung: &MaskVolume,
    lesion: &MaskVolume,
    tag: &str,
    volume: usize,
) -> Vec<FilteredSlide> {
    (0..lung.header.depth)
        .filter(|&z| lung.slide_set_count(z) > 0)
        .map(|z| FilteredSlide {
            slide_id: SlideId {
                tag: tag.to_string(),
                volume,
                slide: z,
            },
            has_lesion: lesion.slide_set_count(z) > 0,
        })
        .collect()
}

/// Walk a manifest and keep every slide whose lung mask is nonempty.
pub fn filter_slides(manifest: &DatasetManifest) -> Result<Vec<FilteredSlide>, PreprocessError> {
    let volume_indices = manifest.volume_indices();
    let mut out = Vec::new();
    for (entry, volume) in manifest.entries.iter().zip(volume_indices) {
        let ct = crate::volume::read_volume(&entry.ct)?.into_hounsfield()?;
        let lung = crate::volume::read_volume(&entry.lung)?.into_mask()?;
        let lesion = crate::volume::read_volume(&entry.lesion)?.into_mask()?;
        validate_pair(&ct, &lung)?;
        validate_pair(&ct, &lesion)?;
        out.extend(filter_volume_slides(&lung, &lesion, &entry.tag, volume));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_count: usize,
    pub val_count: usize,
    #[serde(default = "default_ratio")]
    pub lesion_ratio: f64,
    pub seed: u64,
    /// Volumes whose slides go straight to the test set (whole-patient holdout).
    #[serde(default)]
    pub holdout_volumes: Vec<usize>,
}

fn default_ratio() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<SlideId>,
    pub val: Vec<SlideId>,
    pub test: Vec<SlideId>,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Draw train/val slide lists at the requested lesion ratio; everything else
/// becomes the test set.
pub fn split_dataset(
    slides: &[FilteredSlide],
    spec: &SplitSpec,
) -> Result<Splits, PreprocessError> {
    assert!(
        (0.0..=1.0).contains(&spec.lesion_ratio),
        "lesion_ratio must be in [0,1]"
    );
    let held_out = |s: &FilteredSlide| spec.holdout_volumes.contains(&s.slide_id.volume);

    let mut lesion_pool: Vec<&FilteredSlide> = Vec::new();
    let mut clean_pool: Vec<&FilteredSlide> = Vec::new();
    for s in slides.iter().filter(|s| !held_out(s)) {
        if s.has_lesion {
            lesion_pool.push(s);
        } else {
            clean_pool.push(s);
        }
    }

    let need = |count: usize| {
        let lesion = round_half_up(count as f64 * spec.lesion_ratio);
        (lesion, count - lesion)
    };
    let (train_lesion, train_clean) = need(spec.train_count);
    let (val_lesion, val_clean) = need(spec.val_count);

    if train_lesion + val_lesion > lesion_pool.len() {
        return Err(PreprocessError::InsufficientSlides {
            class: "lesion",
            needed: train_lesion + val_lesion,
            available: lesion_pool.len(),
        });
    }
    if train_clean + val_clean > clean_pool.len() {
        return Err(PreprocessError::InsufficientSlides {
            class: "non-lesion",
            needed: train_clean + val_clean,
            available: clean_pool.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    lesion_pool.shuffle(&mut rng);
    clean_pool.shuffle(&mut rng);

    let take = |pool: &[&FilteredSlide], from: usize, n: usize| -> Vec<SlideId> {
        pool[from..from + n].iter().map(|s| s.slide_id.clone()).collect()
    };
    let mut train = take(&lesion_pool, 0, train_lesion);
    train.extend(take(&clean_pool, 0, train_clean));
    let mut val = take(&lesion_pool, train_lesion, val_lesion);
    val.extend(take(&clean_pool, train_clean, val_clean));

    let chosen: std::collections::HashSet<&SlideId> = train.iter().chain(val.iter()).collect();
    let test: Vec<SlideId> = slides
        .iter()
        .map(|s| &s.slide_id)
        .filter(|id| !chosen.contains(id))
        .cloned()
        .collect();

    Ok(Splits { train, val, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LintKind {
    LesionOutsideLung,
    TinyComponent,
}

/// Inclusive pixel bounding box (x0, y0) .. (x1, y1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintFinding {
    pub slide: usize,
    pub kind: LintKind,
    pub pixel_count: usize,
    pub bbox: BoundingBox,
}

pub const DEFAULT_MIN_COMPONENT: usize = 10;

/// Flag suspicious lesion annotations: 4-connected components that stray
/// outside the lung mask, and components smaller than `min_component` pixels.
pub fn lint_annotations(
    lung: &MaskVolume,
    lesion: &MaskVolume,
    min_component: usize,
) -> Result<Vec<LintFinding>, PreprocessError> {
    if lung.header.dims() != lesion.header.dims() {
        return Err(VolumeError::DimensionMismatch {
            ct: lung.header.dims(),
            mask: lesion.header.dims(),
        }
        .into());
    }
    let (w, h, d) = lung.header.dims();
    let mut findings = Vec::new();
    let mut visited = vec![false; w * h];
    let mut stack = Vec::new();

    for z in 0..d {
        let lung_slide = lung.slide(z);
        let lesion_slide = lesion.slide(z);
        visited.fill(false);

        for start in 0..w * h {
            if lesion_slide[start] != 1 || visited[start] {
                continue;
            }
            // Flood one 4-connected component.
            let mut count = 0usize;
            let mut outside = false;
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
            visited[start] = true;
            stack.push(start);
            while let Some(p) = stack.pop() {
                let (y, x) = (p / w, p % w);
                count += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                if lung_slide[p] == 0 {
                    outside = true;
                }
                let mut push = |q: usize| {
                    if lesion_slide[q] == 1 && !visited[q] {
                        visited[q] = true;
                        stack.push(q);
                    }
                };
                if x > 0 {
                    push(p - 1);
                }
                if x + 1 < w {
                    push(p + 1);
                }
                if y > 0 {
                    push(p - w);
                }
                if y + 1 < h {
                    push(p + w);
                }
            }
            let bbox = BoundingBox { x0, y0, x1, y1 };
            if outside {
                findings.push(LintFinding {
                    slide: z,
                    kind: LintKind::LesionOutsideLung,
                    pixel_count: count,
                    bbox,
                });
            }
            if count < min_component {
                findings.push(LintFinding {
                    slide: z,
                    kind: LintKind::TinyComponent,
                    pixel_count: count,
                    bbox,
                });
            }
        }
    }
    Ok(findings)
}

/// Build model-ready samples for every lung-bearing slide of one volume
/// triple, resizing each plane to `side`.
pub fn samples_from_volumes(
    ct: &HounsfieldVolume,
    lung: &MaskVolume,
    lesion: &MaskVolume,
    tag: &str,
    volume: usize,
    bank: &ChannelBank,
    side: usize,
    mode: SampleMode,
) -> Result<Vec<Sample>, PreprocessError> {
    validate_pair(ct, lung)?;
    validate_pair(ct, lesion)?;
    let (w, h, _) = ct.header.dims();
    let mut out = Vec::new();
    for f in filter_volume_slides(lung, lesion, tag, volume) {
        let z = f.slide_id.slide;
        let hu = resize_nn(&Grid::from_vec(h, w, ct.slide(z).to_vec()), side);
        let lung_grid = resize_nn(&Grid::from_vec(h, w, lung.slide(z).to_vec()), side);
        let lesion_grid = resize_nn(&Grid::from_vec(h, w, lesion.slide(z).to_vec()), side);
        let (input, input_channels, target) = match mode {
            SampleMode::Lesion => (
                assemble_input(&hu, &lung_grid, bank)?,
                4,
                assemble_target(&lesion_grid)?,
            ),
            SampleMode::Lung => (assemble_windows(&hu, bank), 3, assemble_target(&lung_grid)?),
        };
        out.push(Sample {
            slide_id: f.slide_id,
            side,
            input_channels,
            input,
            target,
            has_lesion: f.has_lesion,
        });
    }
    Ok(out)
}

//! Synthetic CT-like volumes with known lung and lesion geometry.
//!
//! Each slide carries one or two elliptical lungs over a soft-tissue
//! background near 0 HU; a configurable share of slides gets a blob-shaped
//! lesion grown inside the lung. The `shift` knob offsets every tissue
//! center, standing in for a different scanner's Hounsfield response. A
//! fault-injection flag plants the two annotation-defect patterns the lint
//! pass is meant to catch.

use crate::preprocess::{DatasetManifest, LintKind, ManifestEntry};
use crate::volume::{HounsfieldVolume, MaskRole, MaskVolume, ValueKind, VolumeError, VolumeHeader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub tag: String,
    #[serde(default = "d_side")]
    pub side: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_volumes")]
    pub volumes: usize,
    #[serde(default = "d_lung_center")]
    pub lung_hu_center: f64,
    #[serde(default = "d_lung_jitter")]
    pub lung_hu_jitter: f64,
    #[serde(default = "d_lesion_center")]
    pub lesion_hu_center: f64,
    #[serde(default = "d_lesion_fraction")]
    pub lesion_fraction: f64,
    /// Share of slides that carry a lesion (the splits want both classes).
    #[serde(default = "d_lesion_slide_fraction")]
    pub lesion_slide_fraction: f64,
    /// HU offset added to all tissue centers: the "different scanner" knob.
    #[serde(default)]
    pub shift: f64,
    #[serde(default = "d_noise_sd")]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub inject_faults: bool,
}

fn d_side() -> usize {
    32
}
fn d_depth() -> usize {
    24
}
fn d_volumes() -> usize {
    4
}
fn d_lung_center() -> f64 {
    -650.0
}
fn d_lung_jitter() -> f64 {
    20.0
}
fn d_lesion_center() -> f64 {
    -300.0
}
fn d_lesion_fraction() -> f64 {
    0.1
}
fn d_lesion_slide_fraction() -> f64 {
    0.5
}
fn d_noise_sd() -> f64 {
    25.0
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            tag: "A".into(),
            side: d_side(),
            depth: d_depth(),
            volumes: d_volumes(),
            lung_hu_center: d_lung_center(),
            lung_hu_jitter: d_lung_jitter(),
            lesion_hu_center: d_lesion_center(),
            lesion_fraction: d_lesion_fraction(),
            lesion_slide_fraction: d_lesion_slide_fraction(),
            shift: 0.0,
            noise_sd: d_noise_sd(),
            seed: 0,
            inject_faults: false,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.tag.is_empty() {
            return Err(PhantomError::InvalidSpec("tag must be nonempty".into()));
        }
        if self.side < 16 {
            return Err(PhantomError::InvalidSpec(format!(
                "side must be at least 16, got {}",
                self.side
            )));
        }
        if self.depth < 1 || self.volumes < 1 {
            return Err(PhantomError::InvalidSpec(
                "depth and volumes must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("lesion_fraction", self.lesion_fraction),
            ("lesion_slide_fraction", self.lesion_slide_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PhantomError::InvalidSpec(format!(
                    "{name} must be in [0,1], got {v}"
                )));
            }
        }
        for (name, center) in [
            ("lung_hu_center", self.lung_hu_center),
            ("lesion_hu_center", self.lesion_hu_center),
        ] {
            let shifted = center + self.shift;
            if !(-970.0 < shifted && shifted < -150.0) {
                return Err(PhantomError::InvalidSpec(format!(
                    "{name} {center} with shift {} lands at {shifted}, outside (-970, -150)",
                    self.shift
                )));
            }
        }
        if self.noise_sd < 0.0 {
            return Err(PhantomError::InvalidSpec("noise_sd must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Ground truth of one planted annotation defect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedFault {
    pub slide: usize,
    pub kind: LintKind,
    pub pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomVolume {
    pub ct: HounsfieldVolume,
    pub lung: MaskVolume,
    pub lesion: MaskVolume,
    pub faults: Vec<InjectedFault>,
}

fn stream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn paint_ellipse(mask: &mut [u8], side: usize, cy: f64, cx: f64, ry: f64, rx: f64) {
    for y in 0..side {
        let dy = (y as f64 - cy) / ry;
        for x in 0..side {
            let dx = (x as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                mask[y * side + x] = 1;
            }
        }
    }
}

/// The 4-connected component of `seed` among lung pixels no farther than
/// `radius` from the seed.
fn component_within_disc(lung: &[u8], side: usize, seed_px: usize, radius: usize) -> Vec<usize> {
    let (sy, sx) = (seed_px / side, seed_px % side);
    let r2 = (radius * radius) as isize;
    let in_disc = |p: usize| {
        let dy = p as isize / side as isize - sy as isize;
        let dx = p as isize % side as isize - sx as isize;
        dy * dy + dx * dx <= r2
    };
    let mut seen = vec![false; side * side];
    let mut out = Vec::new();
    let mut stack = vec![seed_px];
    seen[seed_px] = true;
    while let Some(p) = stack.pop() {
        out.push(p);
        let (y, x) = (p / side, p % side);
        let mut push = |q: usize| {
            if !seen[q] && lung[q] == 1 && in_disc(q) {
                seen[q] = true;
                stack.push(q);
            }
        };
        if x > 0 {
            push(p - 1);
        }
        if x + 1 < side {
            push(p + 1);
        }
        if y > 0 {
            push(p - side);
        }
        if y + 1 < side {
            push(p + side);
        }
    }
    out
}

/// Grow a blob from a random lung pixel until it covers roughly
/// `target` pixels (disc intersected with the lung, connected to the seed).
fn grow_lesion(
    lung: &[u8],
    side: usize,
    rng: &mut ChaCha8Rng,
    target: usize,
) -> Result<Vec<usize>, PhantomError> {
    let lung_px: Vec<usize> = (0..side * side).filter(|&p| lung[p] == 1).collect();
    if lung_px.len() < 3 {
        return Err(PhantomError::InfeasibleGeometry(format!(
            "lung has only {} pixels, cannot place a lesion",
            lung_px.len()
        )));
    }
    let seed_px = lung_px[rng.gen_range(0..lung_px.len())];
    let target = target.min(lung_px.len());
    let mut blob = Vec::new();
    for radius in 1..=side {
        blob = component_within_disc(lung, side, seed_px, radius);
        if blob.len() >= target {
            break;
        }
    }
    Ok(blob)
}

/// True when the window of `half`-radius around (y,x) contains no set pixel
/// in any of the given masks and stays in bounds.
fn window_clear(masks: &[&[u8]], side: usize, y: usize, x: usize, half: usize) -> bool {
    if y < half || x < half || y + half >= side || x + half >= side {
        return false;
    }
    for wy in y - half..=y + half {
        for wx in x - half..=x + half {
            for m in masks {
                if m[wy * side + wx] == 1 {
                    return false;
                }
            }
        }
    }
    true
}

fn generate_volume(spec: &PhantomSpec, volume_index: usize) -> Result<PhantomVolume, PhantomError> {
    let side = spec.side;
    let plane = side * side;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, volume_index as u64));

    let jitter = if spec.lung_hu_jitter > 0.0 {
        rng.gen_range(-spec.lung_hu_jitter..=spec.lung_hu_jitter)
    } else {
        0.0
    };

    // Which slides carry lesions.
    let lesion_slides: Vec<bool> = {
        let mut flags = vec![false; spec.depth];
        if spec.lesion_fraction > 0.0 {
            let count = ((spec.depth as f64) * spec.lesion_slide_fraction + 0.5).floor() as usize;
            let mut order: Vec<usize> = (0..spec.depth).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            for &z in order.iter().take(count.min(spec.depth)) {
                flags[z] = true;
            }
        }
        flags
    };

    let mut lung_voxels = vec![0u8; plane * spec.depth];
    let mut lesion_voxels = vec![0u8; plane * spec.depth];
    let mut ct_voxels = vec![0i16; plane * spec.depth];
    let mut faults = Vec::new();

    for z in 0..spec.depth {
        let lung_slide = &mut lung_voxels[z * plane..(z + 1) * plane];

        // One or two lungs per slide, side by side.
        let two = rng.gen_bool(0.75);
        let s = side as f64;
        let ry = rng.gen_range(s / 6.0..s / 3.5);
        let cy = s * 0.5 + rng.gen_range(-s / 16.0..s / 16.0);
        if two {
            for cx_frac in [0.3, 0.7] {
                let rx = rng.gen_range(s / 8.0..s / 5.5);
                let cx = s * cx_frac + rng.gen_range(-s / 20.0..s / 20.0);
                paint_ellipse(lung_slide, side, cy, cx, ry, rx);
            }
        } else {
            let rx = rng.gen_range(s / 6.0..s / 4.0);
            let cx = s * 0.5 + rng.gen_range(-s / 10.0..s / 10.0);
            paint_ellipse(lung_slide, side, cy, cx, ry, rx);
        }

        if lesion_slides[z] {
            let lung_count = lung_slide.iter().filter(|&&v| v == 1).count();
            if lung_count == 0 {
                return Err(PhantomError::InfeasibleGeometry(format!(
                    "slide {z} selected for a lesion has no lung pixels"
                )));
            }
            let target = ((spec.lesion_fraction * lung_count as f64).round() as usize).max(12);
            let blob = grow_lesion(lung_slide, side, &mut rng, target)?;
            let lesion_slide = &mut lesion_voxels[z * plane..(z + 1) * plane];
            for p in blob {
                lesion_slide[p] = 1;
            }
        }

        // Tissue values: background near 0 HU, lungs and lesions at their
        // shifted centers, per-voxel noise on everything.
        let lung_value = spec.lung_hu_center + jitter + spec.shift;
        let lesion_value = spec.lesion_hu_center + spec.shift;
        let background = spec.shift;
        let lesion_slide = &lesion_voxels[z * plane..(z + 1) * plane];
        let ct_slide = &mut ct_voxels[z * plane..(z + 1) * plane];
        for p in 0..plane {
            let base = if lesion_slide[p] == 1 {
                lesion_value
            } else if lung_voxels[z * plane + p] == 1 {
                lung_value
            } else {
                background
            };
            let v = base + spec.noise_sd * standard_normal(&mut rng);
            ct_slide[p] = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        }
    }

    if spec.inject_faults {
        // One lesion component fully outside the lung, and one 3-pixel
        // component inside it, on random slides.
        let outside_slide = rng.gen_range(0..spec.depth);
        let tiny_slide = rng.gen_range(0..spec.depth);

        let place_outside = |lung: &[u8], lesion: &mut [u8], rng: &mut ChaCha8Rng| -> Option<usize> {
            let start = rng.gen_range(0..plane);
            for offset in 0..plane {
                let p = (start + offset) % plane;
                let (y, x) = (p / side, p % side);
                if window_clear(&[lung, lesion], side, y, x, 3) {
                    let mut count = 0;
                    for dy in -2i32..=2 {
                        for dx in -2i32..=2 {
                            if dy * dy + dx * dx <= 4 {
                                let q =
                                    (y as i32 + dy) as usize * side + (x as i32 + dx) as usize;
                                lesion[q] = 1;
                                count += 1;
                            }
                        }
                    }
                    return Some(count);
                }
            }
            None
        };
        let place_tiny = |lung: &[u8], lesion: &mut [u8], rng: &mut ChaCha8Rng| -> Option<usize> {
            let start = rng.gen_range(0..plane);
            for offset in 0..plane {
                let p = (start + offset) % plane;
                let (y, x) = (p / side, p % side);
                let inside = window_clear(&[lesion], side, y, x, 3)
                    && y + 1 < side
                    && x + 1 < side
                    && lung[y * side + x] == 1
                    && lung[y * side + x + 1] == 1
                    && lung[(y + 1) * side + x] == 1;
                if inside {
                    lesion[y * side + x] = 1;
                    lesion[y * side + x + 1] = 1;
                    lesion[(y + 1) * side + x] = 1;
                    return Some(3);
                }
            }
            None
        };

        {
            let lung = lung_voxels[outside_slide * plane..(outside_slide + 1) * plane].to_vec();
            let lesion = &mut lesion_voxels[outside_slide * plane..(outside_slide + 1) * plane];
            if let Some(count) = place_outside(&lung, lesion, &mut rng) {
                faults.push(InjectedFault {
                    slide: outside_slide,
                    kind: LintKind::LesionOutsideLung,
                    pixel_count: count,
                });
            }
        }
        {
            let lung = lung_voxels[tiny_slide * plane..(tiny_slide + 1) * plane].to_vec();
            let lesion = &mut lesion_voxels[tiny_slide * plane..(tiny_slide + 1) * plane];
            if let Some(count) = place_tiny(&lung, lesion, &mut rng) {
                faults.push(InjectedFault {
                    slide: tiny_slide,
                    kind: LintKind::TinyComponent,
                    pixel_count: count,
                });
            }
        }
    }

    let hu_header = VolumeHeader::new(side, side, spec.depth, ValueKind::HounsfieldI16);
    let mask_header = VolumeHeader::new(side, side, spec.depth, ValueKind::MaskU8);
    Ok(PhantomVolume {
        ct: HounsfieldVolume::new(hu_header, ct_voxels)?,
        lung: MaskVolume::new(mask_header.clone(), MaskRole::Lung, lung_voxels)?,
        lesion: MaskVolume::new(mask_header, MaskRole::Lesion, lesion_voxels)?,
        faults,
    })
}

/// Generate every volume of the spec, deterministically per seed.
pub fn generate_dataset(spec: &PhantomSpec) -> Result<Vec<PhantomVolume>, PhantomError> {
    spec.validate()?;
    (0..spec.volumes)
        .into_par_iter()
        .map(|v| generate_volume(spec, v))
        .collect()
}

/// Write the dataset as CTV files plus a manifest consumable by preprocess.
pub fn write_dataset(
    volumes: &[PhantomVolume],
    dir: &Path,
    tag: &str,
) -> Result<DatasetManifest, PhantomError> {
    let mut manifest = DatasetManifest::default();
    for (i, v) in volumes.iter().enumerate() {
        let base = |kind: &str| dir.join(format!("{tag}_v{i}_{kind}"));
        v.ct.write(&base("ct"))?;
        v.lung.write(&base("lung"))?;
        v.lesion.write(&base("lesion"))?;
        manifest.entries.push(ManifestEntry {
            ct: base("ct"),
            lung: base("lung"),
            lesion: base("lesion"),
            tag: tag.to_string(),
        });
    }
    Ok(manifest)
}

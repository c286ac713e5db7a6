//! On-disk CTV volume format and the in-memory volume types.
//!
//! A volume is stored as two files sharing a base name: `<name>.ctv.json`
//! (header) and `<name>.ctv.raw` (voxels in slide-major, then row-major,
//! then column order). Hounsfield voxels are little-endian two's-complement
//! 16-bit; mask voxels are one byte each, restricted to {0,1}.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed header {path}: {source}")]
    Header {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("raster size mismatch: header implies {expected} bytes, blob has {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("voxel count {actual} does not match header dimensions ({expected} voxels)")]
    VoxelCount { expected: usize, actual: usize },
    #[error("mask voxel {value} at index {index} is not 0 or 1")]
    InvalidMaskValue { value: u8, index: usize },
    #[error("dimension mismatch: CT is {ct:?}, mask is {mask:?} (width,height,depth)")]
    DimensionMismatch {
        ct: (usize, usize, usize),
        mask: (usize, usize, usize),
    },
    #[error("expected a {expected} volume, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    HounsfieldI16,
    MaskU8,
}

impl ValueKind {
    pub fn bytes_per_voxel(self) -> usize {
        match self {
            ValueKind::HounsfieldI16 => 2,
            ValueKind::MaskU8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRole {
    Lung,
    Lesion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub slice_spacing: f64,
    pub value_kind: ValueKind,
}

impl VolumeHeader {
    pub fn new(width: usize, height: usize, depth: usize, value_kind: ValueKind) -> Self {
        VolumeHeader {
            width,
            height,
            depth,
            slice_spacing: 1.0,
            value_kind,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.width * self.height * self.depth
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.depth)
    }

    fn validate(&self) -> Result<(), VolumeError> {
        if self.width < 1 || self.height < 1 || self.depth < 1 {
            return Err(VolumeError::InvalidHeader(format!(
                "dimensions must be at least 1, got {}x{}x{}",
                self.width, self.height, self.depth
            )));
        }
        if !(self.slice_spacing > 0.0) {
            return Err(VolumeError::InvalidHeader(format!(
                "slice_spacing must be positive, got {}",
                self.slice_spacing
            )));
        }
        Ok(())
    }
}

/// A stack of signed 16-bit Hounsfield slides.
#[derive(Debug, Clone, PartialEq)]
pub struct HounsfieldVolume {
    pub header: VolumeHeader,
    pub voxels: Vec<i16>,
}

/// A binary stack aligned to a [`HounsfieldVolume`], marking lung or lesion tissue.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub header: VolumeHeader,
    pub role: MaskRole,
    pub voxels: Vec<u8>,
}

impl HounsfieldVolume {
    pub fn new(header: VolumeHeader, voxels: Vec<i16>) -> Result<Self, VolumeError> {
        header.validate()?;
        if header.value_kind != ValueKind::HounsfieldI16 {
            return Err(VolumeError::InvalidHeader(
                "hounsfield volume requires value_kind hounsfield_i16".into(),
            ));
        }
        if voxels.len() != header.voxel_count() {
            return Err(VolumeError::VoxelCount {
                expected: header.voxel_count(),
                actual: voxels.len(),
            });
        }
        Ok(HounsfieldVolume { header, voxels })
    }

    /// Voxels of slide `z` in row-major order.
    pub fn slide(&self, z: usize) -> &[i16] {
        let n = self.header.width * self.header.height;
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn write(&self, path: &Path) -> Result<(), VolumeError> {
        self.header.validate()?;
        if self.voxels.len() != self.header.voxel_count() {
            return Err(VolumeError::VoxelCount {
                expected: self.header.voxel_count(),
                actual: self.voxels.len(),
            });
        }
        let mut blob = Vec::with_capacity(self.voxels.len() * 2);
        for v in &self.voxels {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        write_ctv(path, &self.header, None, &blob)
    }
}

impl MaskVolume {
    pub fn new(header: VolumeHeader, role: MaskRole, voxels: Vec<u8>) -> Result<Self, VolumeError> {
        header.validate()?;
        if header.value_kind != ValueKind::MaskU8 {
            return Err(VolumeError::InvalidHeader(
                "mask volume requires value_kind mask_u8".into(),
            ));
        }
        if voxels.len() != header.voxel_count() {
            return Err(VolumeError::VoxelCount {
                expected: header.voxel_count(),
                actual: voxels.len(),
            });
        }
        check_binary(&voxels)?;
        Ok(MaskVolume {
            header,
            role,
            voxels,
        })
    }

    pub fn slide(&self, z: usize) -> &[u8] {
        let n = self.header.width * self.header.height;
        &self.voxels[z * n..(z + 1) * n]
    }

    /// Set pixels in slide `z`.
    pub fn slide_set_count(&self, z: usize) -> usize {
        self.slide(z).iter().filter(|&&v| v == 1).count()
    }

    pub fn write(&self, path: &Path) -> Result<(), VolumeError> {
        self.header.validate()?;
        if self.voxels.len() != self.header.voxel_count() {
            return Err(VolumeError::VoxelCount {
                expected: self.header.voxel_count(),
                actual: self.voxels.len(),
            });
        }
        check_binary(&self.voxels)?;
        write_ctv(path, &self.header, Some(self.role), &self.voxels)
    }
}

fn check_binary(voxels: &[u8]) -> Result<(), VolumeError> {
    if let Some(index) = voxels.iter().position(|&v| v > 1) {
        return Err(VolumeError::InvalidMaskValue {
            value: voxels[index],
            index,
        });
    }
    Ok(())
}

/// Either kind of volume, as reconstructed from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Hounsfield(HounsfieldVolume),
    Mask(MaskVolume),
}

impl Volume {
    pub fn write(&self, path: &Path) -> Result<(), VolumeError> {
        match self {
            Volume::Hounsfield(v) => v.write(path),
            Volume::Mask(v) => v.write(path),
        }
    }

    pub fn into_hounsfield(self) -> Result<HounsfieldVolume, VolumeError> {
        match self {
            Volume::Hounsfield(v) => Ok(v),
            Volume::Mask(_) => Err(VolumeError::WrongKind {
                expected: "hounsfield",
                found: "mask",
            }),
        }
    }

    pub fn into_mask(self) -> Result<MaskVolume, VolumeError> {
        match self {
            Volume::Mask(v) => Ok(v),
            Volume::Hounsfield(_) => Err(VolumeError::WrongKind {
                expected: "mask",
                found: "hounsfield",
            }),
        }
    }
}

/// Serialized form of the sidecar header.
#[derive(Serialize, Deserialize)]
struct HeaderFile {
    width: usize,
    height: usize,
    depth: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    slice_spacing: Option<f64>,
    value_kind: ValueKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    role: Option<MaskRole>,
}

/// Resolve the sidecar and blob paths for a base path. Accepts either the
/// bare base name or one of the two concrete file names.
fn ctv_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let base = s
        .strip_suffix(".ctv.json")
        .or_else(|| s.strip_suffix(".ctv.raw"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{base}.ctv.json")),
        PathBuf::from(format!("{base}.ctv.raw")),
    )
}

fn write_ctv(
    path: &Path,
    header: &VolumeHeader,
    role: Option<MaskRole>,
    blob: &[u8],
) -> Result<(), VolumeError> {
    let expected = header.voxel_count() * header.value_kind.bytes_per_voxel();
    if blob.len() != expected {
        return Err(VolumeError::SizeMismatch {
            expected,
            actual: blob.len(),
        });
    }
    let (json_path, raw_path) = ctv_paths(path);
    let file = HeaderFile {
        width: header.width,
        height: header.height,
        depth: header.depth,
        slice_spacing: Some(header.slice_spacing),
        value_kind: header.value_kind,
        role,
    };
    let text = serde_json::to_string_pretty(&file).expect("header serialization");
    fs::write(&json_path, text).map_err(|source| VolumeError::Io {
        path: json_path,
        source,
    })?;
    fs::write(&raw_path, blob).map_err(|source| VolumeError::Io {
        path: raw_path,
        source,
    })
}

pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    let (json_path, raw_path) = ctv_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|source| VolumeError::Io {
        path: json_path.clone(),
        source,
    })?;
    let file: HeaderFile = serde_json::from_str(&text).map_err(|source| VolumeError::Header {
        path: json_path,
        source,
    })?;
    let header = VolumeHeader {
        width: file.width,
        height: file.height,
        depth: file.depth,
        slice_spacing: file.slice_spacing.unwrap_or(1.0),
        value_kind: file.value_kind,
    };
    header.validate()?;
    let blob = fs::read(&raw_path).map_err(|source| VolumeError::Io {
        path: raw_path,
        source,
    })?;
    let expected = header.voxel_count() * header.value_kind.bytes_per_voxel();
    if blob.len() != expected {
        return Err(VolumeError::SizeMismatch {
            expected,
            actual: blob.len(),
        });
    }
    match header.value_kind {
        ValueKind::HounsfieldI16 => {
            if file.role.is_some() {
                return Err(VolumeError::InvalidHeader(
                    "hounsfield volume must not declare a mask role".into(),
                ));
            }
            let voxels = blob
                .chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]))
                .collect();
            Ok(Volume::Hounsfield(HounsfieldVolume { header, voxels }))
        }
        ValueKind::MaskU8 => {
            let role = file.role.ok_or_else(|| {
                VolumeError::InvalidHeader("mask volume missing role field".into())
            })?;
            check_binary(&blob)?;
            Ok(Volume::Mask(MaskVolume {
                header,
                role,
                voxels: blob,
            }))
        }
    }
}

/// Check that a CT volume and a mask cover the same grid.
pub fn validate_pair(ct: &HounsfieldVolume, mask: &MaskVolume) -> Result<(), VolumeError> {
    if ct.header.dims() != mask.header.dims() {
        return Err(VolumeError::DimensionMismatch {
            ct: ct.header.dims(),
            mask: mask.header.dims(),
        });
    }
    Ok(())
}

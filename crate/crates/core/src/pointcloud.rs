//! Point-cloud export: one (x, y, z, value) row per lung pixel, z advancing
//! by a constant per slide, written as CSV for external 3D viewers.

use crate::preprocess::{window_normalize, WindowSpec};
use crate::volume::{HounsfieldVolume, MaskVolume};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("dimension mismatch: CT is {ct:?}, mask is {mask:?}")]
    DimensionMismatch {
        ct: (usize, usize, usize),
        mask: (usize, usize, usize),
    },
    #[error("spacing must be positive, got {0}")]
    BadSpacing(f64),
    #[error("prediction stack has {found} slides, volume has {expected}")]
    PredictionDepth { expected: usize, found: usize },
    #[error("prediction slide {slide} has {found} pixels, expected {expected}")]
    PredictionShape {
        slide: usize,
        expected: usize,
        found: usize,
    },
    #[error("prediction mask contains non-binary value {0}")]
    NonBinaryPrediction(u8),
}

/// Where the exported color value comes from.
pub enum PointSource<'a> {
    /// Window-1 normalized CT intensity.
    Ct,
    /// Radiologist lesion annotation, 0/1.
    GroundTruth(&'a MaskVolume),
    /// Model output masks, one per slide, 0/1.
    Prediction(&'a [Vec<u8>]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointRow {
    pub x: usize,
    pub y: usize,
    pub z: f64,
    pub value: f64,
}

/// Emit one row per lung pixel, slide-major then row-major, with
/// z = slide_index * spacing.
pub fn export_pointcloud(
    ct: &HounsfieldVolume,
    lung: &MaskVolume,
    source: &PointSource,
    spacing: f64,
) -> Result<Vec<PointRow>, ExportError> {
    if ct.header.dims() != lung.header.dims() {
        return Err(ExportError::DimensionMismatch {
            ct: ct.header.dims(),
            mask: lung.header.dims(),
        });
    }
    if !(spacing > 0.0) {
        return Err(ExportError::BadSpacing(spacing));
    }
    let (w, h, d) = ct.header.dims();
    match source {
        PointSource::GroundTruth(mask) => {
            if mask.header.dims() != ct.header.dims() {
                return Err(ExportError::DimensionMismatch {
                    ct: ct.header.dims(),
                    mask: mask.header.dims(),
                });
            }
        }
        PointSource::Prediction(slides) => {
            if slides.len() != d {
                return Err(ExportError::PredictionDepth {
                    expected: d,
                    found: slides.len(),
                });
            }
            for (z, s) in slides.iter().enumerate() {
                if s.len() != w * h {
                    return Err(ExportError::PredictionShape {
                        slide: z,
                        expected: w * h,
                        found: s.len(),
                    });
                }
                if let Some(&v) = s.iter().find(|&&v| v > 1) {
                    return Err(ExportError::NonBinaryPrediction(v));
                }
            }
        }
        PointSource::Ct => {}
    }

    let window1 = WindowSpec {
        lo: -970.0,
        hi: -150.0,
    };
    let mut rows = Vec::new();
    for z in 0..d {
        let zf = z as f64 * spacing;
        let lung_slide = lung.slide(z);
        let ct_slide = ct.slide(z);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if lung_slide[p] != 1 {
                    continue;
                }
                let value = match source {
                    PointSource::Ct => window_normalize(ct_slide[p] as f64, &window1),
                    PointSource::GroundTruth(mask) => mask.slide(z)[p] as f64,
                    PointSource::Prediction(slides) => slides[z][p] as f64,
                };
                rows.push(PointRow { x, y, z: zf, value });
            }
        }
    }
    Ok(rows)
}

/// Format with up to six significant digits, trimming trailing zeros.
fn fmt_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Render rows as CSV with an `x,y,z,value` header and LF line endings.
pub fn pointcloud_csv(rows: &[PointRow], nonzero_only: bool) -> String {
    let mut out = String::from("x,y,z,value\n");
    for row in rows {
        if nonzero_only && row.value == 0.0 {
            continue;
        }
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.x,
            row.y,
            fmt_sig6(row.z),
            fmt_sig6(row.value)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{MaskRole, ValueKind, VolumeHeader};

    fn fixture() -> (HounsfieldVolume, MaskVolume) {
        let w = 4;
        let h = 3;
        let d = 4;
        let ct_header = VolumeHeader::new(w, h, d, ValueKind::HounsfieldI16);
        let mask_header = VolumeHeader::new(w, h, d, ValueKind::MaskU8);
        let ct = HounsfieldVolume::new(
            ct_header,
            (0..w * h * d).map(|i| -970 + (i as i16) * 10).collect(),
        )
        .unwrap();
        // Five lung pixels spread over slides 0 and 3.
        let mut lung = vec![0u8; w * h * d];
        lung[0] = 1;
        lung[5] = 1;
        lung[7] = 1;
        lung[3 * w * h + 2] = 1;
        lung[3 * w * h + 9] = 1;
        let lung = MaskVolume::new(mask_header, MaskRole::Lung, lung).unwrap();
        (ct, lung)
    }

    #[test]
    fn row_count_equals_lung_pixels() {
        let (ct, lung) = fixture();
        let rows = export_pointcloud(&ct, &lung, &PointSource::Ct, 1.0).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.value)));
    }

    #[test]
    fn z_is_slide_index_times_spacing() {
        let (ct, lung) = fixture();
        let rows = export_pointcloud(&ct, &lung, &PointSource::Ct, 2.5).unwrap();
        assert_eq!(rows[0].z, 0.0);
        assert_eq!(rows[1].z, 0.0);
        assert_eq!(rows[2].z, 0.0);
        assert_eq!(rows[3].z, 3.0 * 2.5);
        assert_eq!(rows[4].z, 3.0 * 2.5);
    }

    #[test]
    fn prediction_source_emits_zero_rows_too() {
        let (ct, lung) = fixture();
        let preds = vec![vec![0u8; 12]; 4];
        let rows = export_pointcloud(&ct, &lung, &PointSource::Prediction(&preds), 1.0).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.value == 0.0));
    }

    #[test]
    fn ground_truth_source_copies_mask_bits() {
        let (ct, lung) = fixture();
        let mut lesion = vec![0u8; 48];
        lesion[5] = 1;
        let lesion = MaskVolume::new(
            VolumeHeader::new(4, 3, 4, ValueKind::MaskU8),
            MaskRole::Lesion,
            lesion,
        )
        .unwrap();
        let rows = export_pointcloud(&ct, &lung, &PointSource::GroundTruth(&lesion), 1.0).unwrap();
        let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
        assert_eq!(values, vec![0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn csv_is_stable_and_trimmable() {
        let (ct, lung) = fixture();
        let rows = export_pointcloud(&ct, &lung, &PointSource::Ct, 1.5).unwrap();
        let a = pointcloud_csv(&rows, false);
        let b = pointcloud_csv(&rows, false);
        assert_eq!(a, b);
        assert!(a.starts_with("x,y,z,value\n"));
        assert_eq!(a.lines().count(), 6);

        let preds = vec![vec![0u8; 12]; 4];
        let zero_rows =
            export_pointcloud(&ct, &lung, &PointSource::Prediction(&preds), 1.0).unwrap();
        let trimmed = pointcloud_csv(&zero_rows, true);
        assert_eq!(trimmed.lines().count(), 1);
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(1.0), "1");
        assert_eq!(fmt_sig6(4.5), "4.5");
        assert_eq!(fmt_sig6(0.8170731707317073), "0.817073");
        assert_eq!(fmt_sig6(123.456789), "123.457");
        assert_eq!(fmt_sig6(0.000123456789), "0.000123457");
    }

    #[test]
    fn shape_errors_are_reported() {
        let (ct, lung) = fixture();
        assert!(matches!(
            export_pointcloud(&ct, &lung, &PointSource::Ct, 0.0),
            Err(ExportError::BadSpacing(_))
        ));
        let short = vec![vec![0u8; 12]; 3];
        assert!(matches!(
            export_pointcloud(&ct, &lung, &PointSource::Prediction(&short), 1.0),
            Err(ExportError::PredictionDepth { .. })
        ));
    }
}

//! Per-slide confusion counts, the four derived metrics, and the averaging
//! convention: aggregates run over lesion-bearing slides only.

use crate::preprocess::SlideId;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shape mismatch: {left} vs {right} pixels")]
    ShapeMismatch { left: usize, right: usize },
    #[error("mask contains non-binary value {0}")]
    NonBinary(u8),
    #[error("confusion counts sum to zero")]
    EmptySlide,
    #[error("no qualifying slides to aggregate")]
    NoQualifyingSlides,
    #[error("metric rows and lesion flags differ in length: {rows} vs {flags}")]
    MisalignedFlags { rows: usize, flags: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub slide_id: SlideId,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Count the pixel-level confusion between a predicted and a ground-truth
/// mask. The positive class is the lesion pixel (value 1).
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&p, &g) in pred.iter().zip(gt) {
        if p > 1 {
            return Err(MetricsError::NonBinary(p));
        }
        if g > 1 {
            return Err(MetricsError::NonBinary(g));
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Accuracy, precision, recall, and F1 from one slide's counts. Vanishing
/// denominators yield 0 rather than NaN.
pub fn slice_metrics(slide_id: SlideId, c: &ConfusionCounts) -> Result<SliceMetrics, MetricsError> {
    let total = c.total();
    if total == 0 {
        return Err(MetricsError::EmptySlide);
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = (c.tp + c.tn) as f64 / total as f64;
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(SliceMetrics {
        slide_id,
        accuracy,
        precision,
        recall,
        f1,
    })
}

/// Mean metrics plus the number of slides that qualified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub slide_count: usize,
}

/// Unweighted mean over the slides whose lesion flag is set.
pub fn aggregate(
    rows: &[SliceMetrics],
    lesion_flags: &[bool],
) -> Result<AggregateMetrics, MetricsError> {
    if rows.len() != lesion_flags.len() {
        return Err(MetricsError::MisalignedFlags {
            rows: rows.len(),
            flags: lesion_flags.len(),
        });
    }
    let mut agg = AggregateMetrics {
        accuracy: 0.0,
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        slide_count: 0,
    };
    for (row, &qualifies) in rows.iter().zip(lesion_flags) {
        if !qualifies {
            continue;
        }
        agg.accuracy += row.accuracy;
        agg.precision += row.precision;
        agg.recall += row.recall;
        agg.f1 += row.f1;
        agg.slide_count += 1;
    }
    if agg.slide_count == 0 {
        return Err(MetricsError::NoQualifyingSlides);
    }
    let n = agg.slide_count as f64;
    agg.accuracy /= n;
    agg.precision /= n;
    agg.recall /= n;
    agg.f1 /= n;
    Ok(agg)
}

/// Render the per-slide metric report, one row per slide plus the
/// lesion-only mean row.
pub fn metrics_csv(rows: &[SliceMetrics], lesion_flags: &[bool]) -> Result<String, MetricsError> {
    let agg = aggregate(rows, lesion_flags)?;
    let mut out = String::from("slide_id,accuracy,precision,recall,f1,has_lesion\n");
    for (row, &flag) in rows.iter().zip(lesion_flags) {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            row.slide_id, row.accuracy, row.precision, row.recall, row.f1, flag
        ));
    }
    out.push_str(&format!(
        "MEAN(covid-only),{:.6},{:.6},{:.6},{:.6},{}\n",
        agg.accuracy, agg.precision, agg.recall, agg.f1, agg.slide_count
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(slide: usize) -> SlideId {
        SlideId {
            tag: "A".into(),
            volume: 0,
            slide,
        }
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let c = confusion(&[1, 1, 1, 1], &[1, 1, 1, 1]).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 4,
                fp: 0,
                fn_: 0,
                tn: 0
            }
        );
        let m = slice_metrics(id(0), &c).unwrap();
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (1.0, 1.0, 1.0, 1.0)
        );

        let c = confusion(&[0, 0, 0, 0], &[1, 1, 1, 1]).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 0,
                fp: 0,
                fn_: 4,
                tn: 0
            }
        );
    }

    #[test]
    fn mixed_two_by_two_case() {
        // pred [[1,1],[0,0]] vs gt [[1,0],[1,0]]: one of each cell.
        let c = confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                fp: 1,
                fn_: 1,
                tn: 1
            }
        );
    }

    #[test]
    fn derived_counts_match_formulas() {
        let c = ConfusionCounts {
            tp: 2,
            fp: 1,
            fn_: 1,
            tn: 12,
        };
        let m = slice_metrics(id(0), &c).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.accuracy - 0.875).abs() < 1e-15);
    }

    #[test]
    fn empty_prediction_zero_convention() {
        let c = confusion(&[0, 0, 0, 0], &[0, 1, 1, 0]).unwrap();
        let m = slice_metrics(id(0), &c).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn swapping_pred_and_gt_swaps_fp_fn() {
        let pred = [1u8, 1, 0, 0, 1, 0];
        let gt = [1u8, 0, 1, 0, 0, 0];
        let a = confusion(&pred, &gt).unwrap();
        let b = confusion(&gt, &pred).unwrap();
        assert_eq!(a.tp, b.tp);
        assert_eq!(a.tn, b.tn);
        assert_eq!(a.fp, b.fn_);
        assert_eq!(a.fn_, b.fp);
    }

    #[test]
    fn zero_total_is_an_error() {
        let c = ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 0,
        };
        assert!(matches!(
            slice_metrics(id(0), &c),
            Err(MetricsError::EmptySlide)
        ));
    }

    #[test]
    fn aggregate_filters_and_averages() {
        let mk = |slide, f1| SliceMetrics {
            slide_id: id(slide),
            accuracy: 0.9,
            precision: f1,
            recall: f1,
            f1,
        };
        let rows = vec![mk(0, 0.8), mk(1, 0.6), mk(2, 0.1)];
        let agg = aggregate(&rows, &[true, true, false]).unwrap();
        assert!((agg.f1 - 0.7).abs() < 1e-15);
        assert_eq!(agg.slide_count, 2);

        let single = aggregate(&rows[..1], &[true]).unwrap();
        assert_eq!(single.f1, rows[0].f1);

        assert!(matches!(
            aggregate(&rows, &[false, false, false]),
            Err(MetricsError::NoQualifyingSlides)
        ));
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mk = |slide, f1| SliceMetrics {
            slide_id: id(slide),
            accuracy: f1,
            precision: f1,
            recall: f1,
            f1,
        };
        let rows = vec![mk(0, 0.3), mk(1, 0.9), mk(2, 0.5)];
        let flags = [true, false, true];
        let a = aggregate(&rows, &flags).unwrap();
        let rows_rev: Vec<_> = rows.iter().rev().cloned().collect();
        let flags_rev = [true, false, true];
        let b = aggregate(&rows_rev, &flags_rev).unwrap();
        assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn csv_appends_mean_row() {
        let rows = vec![SliceMetrics {
            slide_id: id(3),
            accuracy: 1.0,
            precision: 0.5,
            recall: 0.5,
            f1: 0.5,
        }];
        let csv = metrics_csv(&rows, &[true]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "slide_id,accuracy,precision,recall,f1,has_lesion");
        assert!(lines[1].starts_with("A/v0/s3,"));
        assert!(lines[2].starts_with("MEAN(covid-only),"));
        assert!(lines[2].ends_with(",1"));
    }
}

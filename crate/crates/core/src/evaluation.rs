//! Depth error, precision at a tolerance, recall, F1 and error histograms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::data::MarkerPick;
use crate::inference::Detection;

/// Tolerances (ft) reported by default.
pub const DEFAULT_TOLERANCES_FT: [f64; 4] = [1.0, 2.0, 5.0, 10.0];
/// Tolerance at which F1 is summarized.
pub const F1_TOLERANCE_FT: f64 = 2.0;
pub const HISTOGRAM_BIN_FT: f64 = 0.5;
pub const HISTOGRAM_MAX_FT: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("precision is undefined without valid detections")]
    UndefinedPrecision,
    #[error("recall needs at least one test well")]
    NoWells,
    #[error("{m} detections exceed {n} test wells")]
    TooManyDetections { m: usize, n: usize },
    #[error("no expert pick for marker `{marker}` in well `{well}`")]
    MissingTruth { well: String, marker: String },
    #[error("duplicate detection for marker `{marker}` in well `{well}`")]
    DuplicateDetection { well: String, marker: String },
}

/// Absolute depth error in feet between two sample indices.
pub fn error_ft(expert_index: usize, ml_index: usize, depth_step: f64) -> f64 {
    expert_index.abs_diff(ml_index) as f64 * depth_step
}

/// Share of `errors` at or below `tolerance_ft`.
pub fn precision_at(errors: &[f64], tolerance_ft: f64) -> Result<f64, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::UndefinedPrecision);
    }
    let hits = errors.iter().filter(|&&e| e <= tolerance_ft).count();
    Ok(hits as f64 / errors.len() as f64)
}

/// Valid detections over test wells.
pub fn recall(m: usize, n: usize) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::NoWells);
    }
    if m > n {
        return Err(EvalError::TooManyDetections { m, n });
    }
    Ok(m as f64 / n as f64)
}

/// Harmonic mean, defined as 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Counts per half-open bin `[k·w, (k+1)·w)` below `max_ft`, plus a final
/// overflow bin for errors of at least `max_ft`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// Regular bin edges, `0, w, 2w, ..., max_ft`.
    pub edges: Vec<f64>,
    /// One count per regular bin, then the overflow count.
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        let regular = self.edges.len() - 1;
        for k in 0..regular {
            let _ = writeln!(out, "{},{},{}", self.edges[k], self.edges[k + 1], self.counts[k]);
        }
        let _ = writeln!(out, "{},inf,{}", self.edges[regular], self.counts[regular]);
        out
    }
}

pub fn error_histogram(errors: &[f64], bin_width_ft: f64, max_ft: f64) -> Histogram {
    assert!(bin_width_ft > 0.0, "bin width must be positive");
    let bins = (max_ft / bin_width_ft).ceil() as usize;
    let edges: Vec<f64> = (0..=bins).map(|k| k as f64 * bin_width_ft).collect();
    let mut counts = vec![0; bins + 1];
    for &e in errors {
        let k = if e >= edges[bins] {
            bins
        } else {
            ((e / bin_width_ft).floor() as usize).min(bins - 1)
        };
        counts[k] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkerReport {
    pub marker: String,
    /// Valid detections.
    pub m: usize,
    /// Test wells with a detection attempt.
    pub n: usize,
    /// Errors (ft) of the valid detections, ascending.
    pub errors: Vec<f64>,
    /// One entry per tolerance; `None` when `m == 0`.
    pub precision: Vec<Option<f64>>,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tolerances: Vec<f64>,
    /// Sorted by marker name.
    pub markers: Vec<MarkerReport>,
    /// Mean over markers whose precision is defined; `None` if none are.
    pub mean_precision: Vec<Option<f64>>,
    pub mean_recall: f64,
    /// F1 of the 2 ft mean precision (0 if undefined) and the mean recall.
    pub f1: f64,
    pub histogram: Histogram,
}

impl EvalReport {
    /// `marker,d_T,precision,recall` rows, per marker then `ALL` for the means.
    pub fn to_csv(&self) -> String {
        let fmt = |p: Option<f64>| p.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let mut out = String::from("marker,d_T,precision,recall\n");
        for m in &self.markers {
            for (t, p) in self.tolerances.iter().zip(&m.precision) {
                let _ = writeln!(out, "{},{},{},{}", m.marker, t, fmt(*p), m.recall);
            }
        }
        for (t, p) in self.tolerances.iter().zip(&self.mean_precision) {
            let _ = writeln!(out, "ALL,{},{},{}", t, fmt(*p), self.mean_recall);
        }
        out
    }

    pub fn summary_line(&self) -> String {
        format!("F1@2ft,{}", self.f1)
    }
}

/// Scores detections against expert picks. Only valid detections count
/// towards `M` and the error list; every detection's well counts towards `N`.
pub fn evaluate_dataset(
    detections: &[Detection],
    picks: &[MarkerPick],
    tolerances: &[f64],
) -> Result<EvalReport, EvalError> {
    let truth: BTreeMap<(&str, &str), f64> = picks
        .iter()
        .map(|p| ((p.well_id.as_str(), p.marker.as_str()), p.depth_ft))
        .collect();

    let mut wells: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut errors: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for d in detections {
        let expert = truth
            .get(&(d.well_id.as_str(), d.marker.as_str()))
            .ok_or_else(|| EvalError::MissingTruth {
                well: d.well_id.clone(),
                marker: d.marker.clone(),
            })?;
        if !wells.entry(&d.marker).or_default().insert(&d.well_id) {
            return Err(EvalError::DuplicateDetection {
                well: d.well_id.clone(),
                marker: d.marker.clone(),
            });
        }
        let list = errors.entry(&d.marker).or_default();
        if d.valid {
            list.push((expert - d.depth_ft).abs());
        }
    }

    let mut markers = Vec::with_capacity(wells.len());
    for (marker, well_set) in &wells {
        let mut errs = errors.remove(marker).unwrap_or_default();
        errs.sort_by(f64::total_cmp);
        let n = well_set.len();
        let m = errs.len();
        markers.push(MarkerReport {
            marker: marker.to_string(),
            m,
            n,
            precision: tolerances.iter().map(|&t| precision_at(&errs, t).ok()).collect(),
            recall: recall(m, n)?,
            errors: errs,
        });
    }

    let mean_precision: Vec<Option<f64>> = (0..tolerances.len())
        .map(|k| {
            let defined: Vec<f64> = markers.iter().filter_map(|m| m.precision[k]).collect();
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
        })
        .collect();
    let mean_recall = if markers.is_empty() {
        0.0
    } else {
        markers.iter().map(|m| m.recall).sum::<f64>() / markers.len() as f64
    };
    let p2 = markers_mean_precision(&markers, F1_TOLERANCE_FT);
    let all_errors: Vec<f64> = markers.iter().flat_map(|m| m.errors.iter().copied()).collect();

    Ok(EvalReport {
        tolerances: tolerances.to_vec(),
        f1: f1_score(p2.unwrap_or(0.0), mean_recall),
        markers,
        mean_precision,
        mean_recall,
        histogram: error_histogram(&all_errors, HISTOGRAM_BIN_FT, HISTOGRAM_MAX_FT),
    })
}

fn markers_mean_precision(markers: &[MarkerReport], tolerance_ft: f64) -> Option<f64> {
    let defined: Vec<f64> = markers
        .iter()
        .filter_map(|m| precision_at(&m.errors, tolerance_ft).ok())
        .collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

//! Turning probability curves into marker detections, with MC-dropout
//! uncertainty and the validity filter.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Checkpoint, DataError, LogChannel, WellLog};
use crate::layers::Mode;
use crate::net::{MarkerNet, NetError};

/// Default number of stochastic passes.
pub const DEFAULT_MC_PASSES: usize = 30;
/// Detections need a probability strictly above this.
pub const DEFAULT_PROB_THRESHOLD: f64 = 0.5;
/// Detections need an uncertainty strictly below this many feet.
pub const DEFAULT_UNCERTAINTY_THRESHOLD_FT: f64 = 5.0;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("model for {marker} expects channels {expected} but well `{well}` has {found}")]
    ChannelMismatch {
        marker: String,
        well: String,
        expected: String,
        found: String,
    },
    #[error("mc passes must be at least 1")]
    NoPasses,
    #[error("well `{well}`: {source}")]
    Net {
        well: String,
        #[source]
        source: NetError,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
}

/// Location and height of the largest value of a probability curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub index: usize,
    pub depth_ft: f64,
    pub probability: f64,
}

/// Smallest index holding the maximum of `p`. Panics on an empty curve.
pub fn detect(p: &[f64], depth_start: f64, depth_step: f64) -> Peak {
    assert!(!p.is_empty(), "cannot detect on an empty curve");
    let mut index = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[index] {
            index = i;
        }
    }
    Peak {
        index,
        depth_ft: depth_start + index as f64 * depth_step,
        probability: p[index],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub well_id: String,
    pub marker: String,
    /// Sample index of the detection; absent when read back from a CSV.
    pub depth_index: Option<usize>,
    pub depth_ft: f64,
    pub probability: f64,
    pub uncertainty_ft: f64,
    pub valid: bool,
}

/// Marks `d` valid iff `probability > prob_threshold` and
/// `uncertainty_ft < uncertainty_threshold_ft`.
pub fn validate_detection(mut d: Detection, prob_threshold: f64, uncertainty_threshold_ft: f64) -> Detection {
    d.valid = d.probability > prob_threshold && d.uncertainty_ft < uncertainty_threshold_ft;
    d
}

/// Population standard deviation of detection indices, scaled to feet.
fn index_spread_ft(indices: &[usize], depth_step: f64) -> f64 {
    let n = indices.len() as f64;
    let mean = indices.iter().map(|&i| i as f64).sum::<f64>() / n;
    let var = indices.iter().map(|&i| (i as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() * depth_step
}

/// Eval-mode peak plus the spread of the peaks of `n_passes` dropout passes.
///
/// Pass `k` draws its dropout masks from ChaCha8 seeded with `master_seed` on
/// stream `k`, so the result does not depend on how passes are scheduled.
pub fn mc_dropout_detect(
    net: &MarkerNet,
    input: &crate::autodiff::Tensor,
    depth_start: f64,
    depth_step: f64,
    n_passes: usize,
    master_seed: u64,
) -> Result<(Peak, f64), NetError> {
    assert!(n_passes >= 1, "need at least one pass");
    let eval = net.predict_eval(input)?;
    let peak = detect(&eval, depth_start, depth_step);
    let indices = (0..n_passes)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
            rng.set_stream(k as u64);
            let p = net.predict(input, Mode::McDropout, &mut rng)?;
            Ok(detect(&p, depth_start, depth_step).index)
        })
        .collect::<Result<Vec<usize>, NetError>>()?;
    Ok((peak, index_spread_ft(&indices, depth_step)))
}

/// Detection settings.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictConfig {
    pub mc_passes: usize,
    pub seed: u64,
    pub prob_threshold: f64,
    pub uncertainty_threshold_ft: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            mc_passes: DEFAULT_MC_PASSES,
            seed: 42,
            prob_threshold: DEFAULT_PROB_THRESHOLD,
            uncertainty_threshold_ft: DEFAULT_UNCERTAINTY_THRESHOLD_FT,
        }
    }
}

/// Restricts a raw well to the checkpoint's channels and normalizes it.
pub fn prepare_well(ckpt: &Checkpoint, well: &WellLog) -> Result<WellLog, InferenceError> {
    let mismatch = || InferenceError::ChannelMismatch {
        marker: ckpt.net.marker.clone(),
        well: well.well_id.clone(),
        expected: ckpt.net.channels.join(","),
        found: well.channels.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(","),
    };
    let wanted = ckpt
        .net
        .channels
        .iter()
        .map(|c| c.parse::<LogChannel>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| mismatch())?;
    let selected = well.select_channels(&wanted).map_err(|_| mismatch())?;
    Ok(ckpt.norm.apply(&selected))
}

/// Runs the full detection protocol on one raw well.
pub fn predict_well(ckpt: &Checkpoint, well: &WellLog, config: &PredictConfig) -> Result<Detection, InferenceError> {
    if config.mc_passes == 0 {
        return Err(InferenceError::NoPasses);
    }
    let input = prepare_well(ckpt, well)?;
    let (peak, uncertainty_ft) = mc_dropout_detect(
        &ckpt.net,
        &input.samples,
        well.depth_start,
        well.depth_step,
        config.mc_passes,
        config.seed,
    )
    .map_err(|source| InferenceError::Net {
        well: well.well_id.clone(),
        source,
    })?;
    let d = Detection {
        well_id: well.well_id.clone(),
        marker: ckpt.net.marker.clone(),
        depth_index: Some(peak.index),
        depth_ft: peak.depth_ft,
        probability: peak.probability,
        uncertainty_ft,
        valid: false,
    };
    Ok(validate_detection(d, config.prob_threshold, config.uncertainty_threshold_ft))
}

/// Per-depth eval-mode probability and attention score for one well.
pub fn well_curves(ckpt: &Checkpoint, well: &WellLog) -> Result<(Vec<f64>, Vec<f64>), InferenceError> {
    let input = prepare_well(ckpt, well)?;
    let wrap = |source| InferenceError::Net {
        well: well.well_id.clone(),
        source,
    };
    let p = ckpt.net.predict_eval(&input.samples).map_err(wrap)?;
    let s = ckpt.net.attention_scores(&input.samples).map_err(wrap)?;
    Ok((p, s))
}

pub const PREDICTIONS_HEADER: &str = "well_id,marker,depth_ft,probability,uncertainty_ft,valid";
pub const CURVES_HEADER: &str = "well_id,depth_ft,probability,attention_score";

pub fn predictions_to_csv(detections: &[Detection]) -> String {
    let mut out = format!("{PREDICTIONS_HEADER}\n");
    for d in detections {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            d.well_id, d.marker, d.depth_ft, d.probability, d.uncertainty_ft, d.valid
        );
    }
    out
}

/// Appends `well_id,depth_ft,probability,attention_score` rows for one well.
pub fn append_curve_rows(out: &mut String, well: &WellLog, probs: &[f64], scores: &[f64]) {
    for (t, (p, s)) in probs.iter().zip(scores).enumerate() {
        let _ = writeln!(out, "{},{},{},{}", well.well_id, well.depth_at(t), p, s);
    }
}

pub fn write_predictions_csv(detections: &[Detection], path: impl AsRef<Path>) -> Result<(), InferenceError> {
    let path = path.as_ref();
    fs::write(path, predictions_to_csv(detections)).map_err(|e| DataError::io(path, e).into())
}

pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<Detection>, InferenceError> {
    let path = path.as_ref();
    let bad = |message: String| InferenceError::Csv {
        path: path.to_path_buf(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>().join(",") != PREDICTIONS_HEADER {
        return Err(bad(format!("expected header `{PREDICTIONS_HEADER}`")));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let line = i + 2;
        let num = |j: usize| {
            rec[j]
                .parse::<f64>()
                .map_err(|_| bad(format!("line {line}: `{}` is not a number", &rec[j])))
        };
        let valid = match &rec[5] {
            "true" | "1" => true,
            "false" | "0" => false,
            other => return Err(bad(format!("line {line}: `{other}` is not a boolean"))),
        };
        out.push(Detection {
            well_id: rec[0].to_string(),
            marker: rec[1].to_string(),
            depth_index: None,
            depth_ft: num(2)?,
            probability: num(3)?,
            uncertainty_ft: num(4)?,
            valid,
        });
    }
    Ok(out)
}

//! Training targets and the binary cross-entropy loss.

use thiserror::Error;

use crate::autodiff::mean_bce;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("marker index {index} outside a sequence of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("label has no entry equal to 1")]
    NotOneHot,
    #[error("prediction length {predictions} does not match target length {targets}")]
    LengthMismatch { predictions: usize, targets: usize },
}

/// Default smoothing scale in samples (1.5 ft at 0.5 ft sampling).
pub const DEFAULT_SIGMA: f64 = 3.0;

/// Gaussian support is cut at this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 4.0;

/// Peak-normalized Gaussian bump centred on a marker.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedLabel {
    pub values: Vec<f64>,
    pub marker_index: usize,
    pub sigma: f64,
}

pub fn one_hot_label(len: usize, marker_index: usize) -> Result<Vec<f64>, LabelError> {
    if marker_index >= len {
        return Err(LabelError::IndexOutOfRange {
            index: marker_index,
            len,
        });
    }
    let mut v = vec![0.0; len];
    v[marker_index] = 1.0;
    Ok(v)
}

/// Convolves a one-hot label with a Gaussian kernel and rescales the peak to 1.
///
/// The kernel is truncated at ±4σ. Convolving a delta with the kernel is the
/// kernel itself, so the result is `exp(-(t - m)² / 2σ²)` inside the support.
pub fn gaussian_smooth_label(one_hot: &[f64], sigma: f64) -> Result<SmoothedLabel, LabelError> {
    assert!(sigma > 0.0, "sigma must be positive");
    let len = one_hot.len();
    let marker_index = one_hot
        .iter()
        .position(|&v| v == 1.0)
        .ok_or(LabelError::NotOneHot)?;
    let reach = (TRUNCATION_SIGMAS * sigma).floor() as usize;
    let lo = marker_index.saturating_sub(reach);
    let hi = (marker_index + reach + 1).min(len);
    let mut values = vec![0.0; len];
    for (t, v) in values.iter_mut().enumerate().take(hi).skip(lo) {
        let d = t as f64 - marker_index as f64;
        *v = (-(d * d) / (2.0 * sigma * sigma)).exp();
    }
    Ok(SmoothedLabel {
        values,
        marker_index,
        sigma,
    })
}

/// Training target for a marker at `index`: smoothed when `sigma` is given,
/// one-hot otherwise.
pub fn marker_target(len: usize, index: usize, sigma: Option<f64>) -> Result<Vec<f64>, LabelError> {
    let hot = one_hot_label(len, index)?;
    match sigma {
        Some(s) => Ok(gaussian_smooth_label(&hot, s)?.values),
        None => Ok(hot),
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-12, 1 - 1e-12]`;
/// see [`mean_bce`].
///
/// The differentiable version lives on the tape as [`crate::autodiff::Tape::bce`].
pub fn bce_loss(probs: &[f64], targets: &[f64]) -> Result<f64, LabelError> {
    if probs.len() != targets.len() {
        return Err(LabelError::LengthMismatch {
            predictions: probs.len(),
            targets: targets.len(),
        });
    }
    Ok(mean_bce(probs, targets))
}

//! End-to-end runs: train one model per marker, detect on the held-out wells,
//! score; and the mode × smoothing × seed ablation grid built from them.

use std::fmt::Write as _;

use log::{info, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::evaluation::{evaluate_dataset, EvalError, EvalReport};
use crate::inference::{predict_well, Detection, InferenceError};
use crate::net::AblationMode;
use crate::training::{train_marker_model, TrainError, TrainedModel};

/// Environment variable capping how many ablation cells run at once.
pub const THREADS_ENV: &str = "SEQMARK_THREADS";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("marker {marker}: {source}")]
    Train {
        marker: String,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no markers requested")]
    NoMarkers,
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub models: Vec<TrainedModel>,
    pub detections: Vec<Detection>,
    pub report: EvalReport,
}

/// Trains a model per marker and evaluates it on the test split of its run.
///
/// The split depends only on the seed and the well count, so every marker sees
/// the same test wells.
pub fn run_pipeline(dataset: &Dataset, markers: &[String], config: &RunConfig) -> Result<PipelineResult, ExperimentError> {
    if markers.is_empty() {
        return Err(ExperimentError::NoMarkers);
    }
    let mut models = Vec::with_capacity(markers.len());
    let mut detections = Vec::new();
    for marker in markers {
        let model = train_marker_model(dataset, marker, &config.net, &config.train).map_err(|source| {
            ExperimentError::Train {
                marker: marker.clone(),
                source,
            }
        })?;
        for &i in &model.split.test {
            let well = &dataset.wells[i];
            if dataset.pick(&well.well_id, marker).is_none() {
                warn!("test well {} has no {marker} pick; not scored", well.well_id);
                continue;
            }
            detections.push(predict_well(&model.checkpoint, well, &config.predict)?);
        }
        models.push(model);
    }
    let report = evaluate_dataset(&detections, &dataset.picks, &config.tolerances)?;
    Ok(PipelineResult {
        models,
        detections,
        report,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AblationCell {
    pub mode: AblationMode,
    pub smoothing: bool,
    pub seed: u64,
}

/// Every (mode, smoothing, seed) combination in merge order: modes as in
/// [`AblationMode::ALL`], smoothing on before off, seeds as given.
pub fn full_grid(seeds: &[u64]) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for mode in AblationMode::ALL {
        for smoothing in [true, false] {
            for &seed in seeds {
                cells.push(AblationCell { mode, smoothing, seed });
            }
        }
    }
    cells
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: AblationCell,
    /// F1 at 2 ft; `None` if the cell failed.
    pub f1: Option<f64>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Cell parallelism from [`THREADS_ENV`], default 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Runs each cell with `base` adjusted to the cell's mode, smoothing and
/// seed. Failures are recorded, not propagated; results keep `cells` order.
pub fn run_ablation(
    dataset: &Dataset,
    markers: &[String],
    base: &RunConfig,
    cells: &[AblationCell],
    threads: usize,
) -> Vec<CellResult> {
    let run = |cell: &AblationCell| {
        let mut cfg = base.clone();
        cfg.train.mode = cell.mode;
        cfg.train.smoothing = cell.smoothing;
        cfg.train.seed = cell.seed;
        cfg.predict.seed = cell.seed;
        match run_pipeline(dataset, markers, &cfg) {
            Ok(r) => {
                info!(
                    "cell {} smoothing={} seed={}: F1 {:.4}",
                    cell.mode, cell.smoothing, cell.seed, r.report.f1
                );
                CellResult {
                    cell: *cell,
                    f1: Some(r.report.f1),
                    report: Some(r.report),
                    error: None,
                }
            }
            Err(e) => {
                warn!("cell {} smoothing={} seed={} failed: {e}", cell.mode, cell.smoothing, cell.seed);
                CellResult {
                    cell: *cell,
                    f1: None,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    if threads <= 1 {
        return cells.iter().map(run).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| cells.par_iter().map(run).collect()),
        Err(e) => {
            warn!("could not start {threads} threads ({e}); running serially");
            cells.iter().map(run).collect()
        }
    }
}

fn on_off(smoothing: bool) -> &'static str {
    if smoothing {
        "on"
    } else {
        "off"
    }
}

/// `mode,smoothing,seed,F1` with `NA` for failed cells.
pub fn ablation_csv(results: &[CellResult]) -> String {
    let mut out = String::from("mode,smoothing,seed,F1\n");
    for r in results {
        let f1 = r.f1.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let _ = writeln!(out, "{},{},{},{}", r.cell.mode, on_off(r.cell.smoothing), r.cell.seed, f1);
    }
    out
}

/// Mean F1 per (mode, smoothing) over the cells that succeeded, in first-seen
/// order. `None` when every seed of a pair failed.
pub fn summarize(results: &[CellResult]) -> Vec<(AblationMode, bool, Option<f64>)> {
    let mut keys: Vec<(AblationMode, bool)> = Vec::new();
    for r in results {
        let k = (r.cell.mode, r.cell.smoothing);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(mode, smoothing)| {
            let f1s: Vec<f64> = results
                .iter()
                .filter(|r| r.cell.mode == mode && r.cell.smoothing == smoothing)
                .filter_map(|r| r.f1)
                .collect();
            let mean = (!f1s.is_empty()).then(|| f1s.iter().sum::<f64>() / f1s.len() as f64);
            (mode, smoothing, mean)
        })
        .collect()
}

/// `mode,smoothing,mean_F1`.
pub fn summary_csv(results: &[CellResult]) -> String {
    let mut out = String::from("mode,smoothing,mean_F1\n");
    for (mode, smoothing, mean) in summarize(results) {
        let mean = mean.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let _ = writeln!(out, "{mode},{},{mean}", on_off(smoothing));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_six_cells_per_seed() {
        let cells = full_grid(&[1, 2]);
        assert_eq!(cells.len(), 12);
        let mut sorted = cells.clone();
        sorted.sort_by_key(|c| (AblationMode::ALL.iter().position(|&m| m == c.mode), !c.smoothing, c.seed));
        assert_eq!(sorted, cells);
    }

    #[test]
    fn csv_and_summary_with_failures() {
        let cell = |mode, smoothing, seed| AblationCell { mode, smoothing, seed };
        let ok = |c, f| CellResult { cell: c, f1: Some(f), report: None, error: None };
        let results = vec![
            ok(cell(AblationMode::Combined, true, 1), 0.75),
            ok(cell(AblationMode::Combined, true, 2), 0.25),
            CellResult {
                cell: cell(AblationMode::Combined, false, 1),
                f1: None,
                report: None,
                error: Some("boom".into()),
            },
        ];
        let csv = ablation_csv(&results);
        assert!(csv.contains("combined,off,1,NA"));
        assert!(csv.contains("combined,on,2,0.25"));
        let summary = summarize(&results);
        assert_eq!(summary[0], (AblationMode::Combined, true, Some(0.5)));
        assert_eq!(summary[1], (AblationMode::Combined, false, None));
        assert_eq!(summary_csv(&results).lines().count(), 3);
    }

    #[test]
    fn failing_cells_are_recorded() {
        // too few wells to split: every cell fails but the run completes
        let results = run_ablation(&Dataset::default(), &["M".into()], &RunConfig::default(), &full_grid(&[3]), 1);
        assert_eq!(results.len(), 6);
        assert!(results.iter().all(|r| r.f1.is_none() && r.error.is_some()));
    }
}

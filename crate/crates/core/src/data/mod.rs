//! Well logs, marker picks and everything that moves them on or off disk.

mod checkpoint;
mod csvio;
mod normalize;
mod synth;

use std::fmt;
use std::io;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use csvio::{load_dataset, load_picks_csv, load_well_csv, load_wells, save_dataset, save_picks_csv, save_well_csv};
pub use normalize::{normalize_wells, NormStats, STD_FLOOR};
pub use synth::{step_statistic, synthesize_wells, MarkerKind, MarkerSpec, SynthConfig};

/// Standard log sampling interval in feet.
pub const DEFAULT_DEPTH_STEP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed CSV: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{path}: file has no data rows")]
    Empty { path: PathBuf },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: line {line}: cannot parse `{value}` in column `{column}` as a finite number")]
    NonNumeric {
        path: PathBuf,
        line: usize,
        column: String,
        value: String,
    },
    #[error("{path}: line {line}: depth does not increase")]
    NonIncreasingDepth { path: PathBuf, line: usize },
    #[error("{path}: line {line}: depth step {found} differs from {expected}")]
    NonUniformStep {
        path: PathBuf,
        line: usize,
        expected: f64,
        found: f64,
    },
    #[error("unknown log channel `{0}` (expected GR, RES or DEN)")]
    UnknownChannel(String),
    #[error("duplicate pick for well `{well}` marker `{marker}`")]
    DuplicatePick { well: String, marker: String },
    #[error("depth {depth} ft lies outside well `{well}` ({start}..={end} ft)")]
    DepthOutOfRange {
        well: String,
        depth: f64,
        start: f64,
        end: f64,
    },
    #[error("well `{well}` lacks channel {channel}")]
    MissingChannel { well: String, channel: LogChannel },
    #[error("invalid synthesis config: {0}")]
    SynthConfig(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint {path}: format version {found}, expected {expected}")]
    CheckpointVersion {
        path: PathBuf,
        found: String,
        expected: u32,
    },
    #[error("checkpoint {path}: file is truncated")]
    CheckpointTruncated { path: PathBuf },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Log measurement types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LogChannel {
    /// Gamma ray.
    Gr,
    /// Resistivity.
    Res,
    /// Bulk density.
    Den,
}

impl LogChannel {
    pub fn as_str(self) -> &'static str {
        match self {
            LogChannel::Gr => "GR",
            LogChannel::Res => "RES",
            LogChannel::Den => "DEN",
        }
    }

    /// Parses a comma-separated channel list such as `gr,res`.
    pub fn parse_list(s: &str) -> Result<Vec<LogChannel>, DataError> {
        s.split(',').map(|c| c.trim().parse()).collect()
    }
}

impl fmt::Display for LogChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LogChannel {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GR" => Ok(LogChannel::Gr),
            "RES" => Ok(LogChannel::Res),
            "DEN" => Ok(LogChannel::Den),
            _ => Err(DataError::UnknownChannel(s.to_string())),
        }
    }
}

/// Uniformly sampled, depth-indexed multichannel log.
#[derive(Clone, Debug, PartialEq)]
pub struct WellLog {
    pub well_id: String,
    pub depth_start: f64,
    pub depth_step: f64,
    pub channels: Vec<LogChannel>,
    /// `[channels, T]`.
    pub samples: Tensor,
}

impl WellLog {
    pub fn new(
        well_id: impl Into<String>,
        depth_start: f64,
        depth_step: f64,
        channels: Vec<LogChannel>,
        samples: Tensor,
    ) -> Self {
        assert_eq!(samples.rank(), 2);
        assert_eq!(samples.shape()[0], channels.len());
        WellLog {
            well_id: well_id.into(),
            depth_start,
            depth_step,
            channels,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn depth_at(&self, index: usize) -> f64 {
        self.depth_start + index as f64 * self.depth_step
    }

    pub fn depth_end(&self) -> f64 {
        self.depth_at(self.len() - 1)
    }

    pub fn channel(&self, c: LogChannel) -> Option<&[f64]> {
        self.channels.iter().position(|&x| x == c).map(|i| self.samples.row(i))
    }

    /// Copy restricted to `wanted`, in that order.
    pub fn select_channels(&self, wanted: &[LogChannel]) -> Result<WellLog, DataError> {
        let mut rows = Vec::with_capacity(wanted.len());
        for &c in wanted {
            let row = self.channel(c).ok_or_else(|| DataError::MissingChannel {
                well: self.well_id.clone(),
                channel: c,
            })?;
            rows.push(row.to_vec());
        }
        let samples = Tensor::from_rows(&rows).expect("rows share the well length");
        Ok(WellLog::new(
            self.well_id.clone(),
            self.depth_start,
            self.depth_step,
            wanted.to_vec(),
            samples,
        ))
    }
}

/// An expert (or predicted) marker depth in one well.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkerPick {
    pub well_id: String,
    pub marker: String,
    pub depth_ft: f64,
}

/// Wells plus the expert picks that label them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub wells: Vec<WellLog>,
    pub picks: Vec<MarkerPick>,
}

impl Dataset {
    pub fn pick(&self, well_id: &str, marker: &str) -> Option<&MarkerPick> {
        self.picks
            .iter()
            .find(|p| p.well_id == well_id && p.marker == marker)
    }

    pub fn well(&self, well_id: &str) -> Option<&WellLog> {
        self.wells.iter().find(|w| w.well_id == well_id)
    }

    /// Marker names in order of first appearance.
    pub fn marker_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for p in &self.picks {
            if !names.contains(&p.marker) {
                names.push(p.marker.clone());
            }
        }
        names
    }
}

/// Nearest sample index for a depth, rounding halves up.
pub fn pick_to_index(depth_ft: f64, well: &WellLog) -> Result<usize, DataError> {
    const SLACK: f64 = 1e-9;
    let pos = (depth_ft - well.depth_start) / well.depth_step;
    let last = (well.len() - 1) as f64;
    if !(pos >= -SLACK && pos <= last + SLACK) {
        return Err(DataError::DepthOutOfRange {
            well: well.well_id.clone(),
            depth: depth_ft,
            start: well.depth_start,
            end: well.depth_end(),
        });
    }
    Ok(((pos + 0.5).floor().max(0.0) as usize).min(well.len() - 1))
}

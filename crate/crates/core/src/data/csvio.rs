use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Dataset, LogChannel, MarkerPick, WellLog, DEFAULT_DEPTH_STEP};
use crate::autodiff::Tensor;

/// Tolerance on the spacing between consecutive depths.
const STEP_TOLERANCE_FT: f64 = 1e-6;

fn reader(path: &Path) -> Result<csv::Reader<fs::File>, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    DataError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn parse_cell(path: &Path, line: usize, column: &str, value: Option<&str>) -> Result<f64, DataError> {
    let Some(raw) = value.filter(|v| !v.is_empty()) else {
        return Err(DataError::MissingColumn {
            path: path.to_path_buf(),
            column: format!("{column} (line {line})"),
        });
    };
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::NonNumeric {
            path: path.to_path_buf(),
            line,
            column: column.to_string(),
            value: raw.to_string(),
        }),
    }
}

/// Reads a `depth,<channels...>` well file. The well id is the file stem.
pub fn load_well_csv(path: impl AsRef<Path>) -> Result<WellLog, DataError> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if !headers.get(0).is_some_and(|h| h.eq_ignore_ascii_case("depth")) {
        return Err(DataError::MissingColumn {
            path: path.to_path_buf(),
            column: "depth".into(),
        });
    }
    let channels = headers
        .iter()
        .skip(1)
        .map(str::parse)
        .collect::<Result<Vec<LogChannel>, _>>()?;
    if channels.is_empty() {
        return Err(DataError::MissingColumn {
            path: path.to_path_buf(),
            column: "GR".into(),
        });
    }

    let mut depths = Vec::new();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); channels.len()];
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        // header is line 1
        let line = i + 2;
        depths.push(parse_cell(path, line, "depth", record.get(0))?);
        for (c, ch) in channels.iter().enumerate() {
            rows[c].push(parse_cell(path, line, ch.as_str(), record.get(c + 1))?);
        }
    }
    if depths.is_empty() {
        return Err(DataError::Empty {
            path: path.to_path_buf(),
        });
    }

    let step = if depths.len() > 1 {
        depths[1] - depths[0]
    } else {
        DEFAULT_DEPTH_STEP
    };
    for (i, pair) in depths.windows(2).enumerate() {
        let d = pair[1] - pair[0];
        if d <= 0.0 {
            return Err(DataError::NonIncreasingDepth {
                path: path.to_path_buf(),
                line: i + 3,
            });
        }
        if (d - step).abs() > STEP_TOLERANCE_FT {
            return Err(DataError::NonUniformStep {
                path: path.to_path_buf(),
                line: i + 3,
                expected: step,
                found: d,
            });
        }
    }

    let well_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let samples = Tensor::from_rows(&rows).expect("columns have equal length");
    Ok(WellLog::new(well_id, depths[0], step, channels, samples))
}

/// Writes a well as `depth,<channels...>` using shortest round-trip float text.
pub fn save_well_csv(well: &WellLog, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = String::with_capacity(well.len() * 24);
    out.push_str("depth");
    for c in &well.channels {
        out.push(',');
        out.push_str(c.as_str());
    }
    out.push('\n');
    for t in 0..well.len() {
        out.push_str(&well.depth_at(t).to_string());
        for c in 0..well.channels.len() {
            out.push(',');
            out.push_str(&well.samples.row(c)[t].to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DataError::io(path, e))
}

/// Reads `well_id,marker,depth_ft` rows; a repeated (well, marker) is an error.
pub fn load_picks_csv(path: impl AsRef<Path>) -> Result<Vec<MarkerPick>, DataError> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    for (i, name) in ["well_id", "marker", "depth_ft"].iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(DataError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            });
        }
    }
    let mut seen = HashSet::new();
    let mut picks = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let field = |j: usize, name: &str| {
            record
                .get(j)
                .filter(|v| !v.is_empty())
                .map(str::to_string)
                .ok_or_else(|| DataError::MissingColumn {
                    path: path.to_path_buf(),
                    column: format!("{name} (line {line})"),
                })
        };
        let well_id = field(0, "well_id")?;
        let marker = field(1, "marker")?;
        let depth_ft = parse_cell(path, line, "depth_ft", record.get(2))?;
        if !seen.insert((well_id.clone(), marker.clone())) {
            return Err(DataError::DuplicatePick { well: well_id, marker });
        }
        picks.push(MarkerPick {
            well_id,
            marker,
            depth_ft,
        });
    }
    Ok(picks)
}

pub fn save_picks_csv(picks: &[MarkerPick], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = String::from("well_id,marker,depth_ft\n");
    for p in picks {
        out.push_str(&format!("{},{},{}\n", p.well_id, p.marker, p.depth_ft));
    }
    fs::write(path, out).map_err(|e| DataError::io(path, e))
}

fn wells_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("wells");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Loads a single well file, or every `*.csv` well in a directory (or its
/// `wells/` subdirectory) in file-name order. `picks.csv` is skipped.
pub fn load_wells(path: impl AsRef<Path>) -> Result<Vec<WellLog>, DataError> {
    let path = path.as_ref();
    if path.is_file() {
        return Ok(vec![load_well_csv(path)?]);
    }
    let dir = wells_dir(path);
    let entries = fs::read_dir(&dir).map_err(|e| DataError::io(&dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| DataError::io(&dir, e))?.path();
        let is_csv = p.extension().is_some_and(|e| e == "csv");
        let is_picks = p.file_name().is_some_and(|n| n == "picks.csv");
        if is_csv && !is_picks {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(DataError::Empty { path: dir });
    }
    files.iter().map(load_well_csv).collect()
}

/// Reads a dataset laid out as `DIR/wells/*.csv` plus `DIR/picks.csv`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let dir = dir.as_ref();
    Ok(Dataset {
        wells: load_wells(dir)?,
        picks: load_picks_csv(dir.join("picks.csv"))?,
    })
}

pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    let wells = dir.join("wells");
    fs::create_dir_all(&wells).map_err(|e| DataError::io(&wells, e))?;
    for w in &dataset.wells {
        save_well_csv(w, wells.join(format!("{}.csv", w.well_id)))?;
    }
    save_picks_csv(&dataset.picks, dir.join("picks.csv"))
}

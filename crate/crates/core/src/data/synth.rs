//! Synthetic layered well logs with strong (step) and subtle (texture-only)
//! markers.
//!
//! Every random draw goes through ChaCha8 and Gaussian samples use Box–Muller
//! with `libm`, so a seed reproduces the same bits on every platform. Draws for
//! the shared layer template come from stream 0 and each well `w` from stream
//! `w + 1`, so wells do not depend on one another's draw counts.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, LogChannel, MarkerPick, WellLog, DEFAULT_DEPTH_STEP};
use crate::autodiff::Tensor;

/// Half-width, in samples, of the windows used by [`step_statistic`].
const STAT_WINDOW: usize = 20;
const BASE_PHI: f64 = 0.8;
/// Share of the noise level carried by white (uncorrelated) noise.
const WHITE_SHARE: f64 = 0.1;
/// Per-well layer-level perturbation, in units of the noise level.
const LEVEL_JITTER: f64 = 0.3;
const MIN_LAYER_SAMPLES: usize = 48;
/// Level step, in noise units, at the top and bottom of a subtle marker's layer.
const SUBTLE_EDGE_STEP: f64 = 3.0;
/// Half-width of the subtle marker's position within its layer, as a fraction.
const SUBTLE_JITTER: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarkerKind {
    /// A baseline shift across a layer boundary.
    Strong,
    /// A change in texture variance and autocorrelation only.
    Subtle,
}

impl FromStr for MarkerKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "strong" => Ok(MarkerKind::Strong),
            "subtle" => Ok(MarkerKind::Subtle),
            other => Err(DataError::SynthConfig(format!(
                "unknown marker kind `{other}` (expected strong or subtle)"
            ))),
        }
    }
}

impl fmt::Display for MarkerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarkerKind::Strong => "strong",
            MarkerKind::Subtle => "subtle",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarkerSpec {
    pub name: String,
    pub kind: MarkerKind,
}

impl MarkerSpec {
    /// Parses `NAME:kind[,NAME:kind...]`, shallowest marker first.
    pub fn parse_list(s: &str) -> Result<Vec<MarkerSpec>, DataError> {
        s.split(',')
            .map(|item| {
                let (name, kind) = item.trim().split_once(':').ok_or_else(|| {
                    DataError::SynthConfig(format!("marker `{item}` must look like NAME:strong"))
                })?;
                if name.trim().is_empty() {
                    return Err(DataError::SynthConfig("empty marker name".into()));
                }
                Ok(MarkerSpec {
                    name: name.trim().to_string(),
                    kind: kind.parse()?,
                })
            })
            .collect()
    }

    pub fn format_list(markers: &[MarkerSpec]) -> String {
        markers
            .iter()
            .map(|m| format!("{}:{}", m.name, m.kind))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_wells: usize,
    /// Inclusive range of well lengths in samples.
    pub min_len: usize,
    pub max_len: usize,
    pub channels: Vec<LogChannel>,
    /// Markers in stratigraphic order, shallowest first.
    pub markers: Vec<MarkerSpec>,
    pub n_layers: usize,
    /// Relative amplitude of the smooth thickness trend across the transect.
    pub trend_amplitude: f64,
    /// GR texture standard deviation (API units).
    pub noise_std: f64,
    /// Baseline shift at a strong marker, in units of `noise_std`.
    pub strong_step: f64,
    /// Below a subtle marker the texture std is multiplied and the AR
    /// coefficient divided by this ratio.
    pub subtle_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_wells: 80,
            min_len: 1500,
            max_len: 2500,
            channels: vec![LogChannel::Gr],
            markers: MarkerSpec::parse_list("UB000:strong,MB000:strong,TF180:subtle")
                .expect("default markers parse"),
            n_layers: 12,
            trend_amplitude: 0.3,
            noise_std: 4.0,
            strong_step: 8.0,
            subtle_ratio: 1.5,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::SynthConfig(m));
        if self.n_wells == 0 {
            return fail("n_wells must be positive".into());
        }
        if self.min_len > self.max_len {
            return fail(format!("min_len {} exceeds max_len {}", self.min_len, self.max_len));
        }
        if self.channels.is_empty() {
            return fail("at least one channel is required".into());
        }
        for (i, c) in self.channels.iter().enumerate() {
            if self.channels[..i].contains(c) {
                return fail(format!("channel {c} listed twice"));
            }
        }
        if self.markers.is_empty() {
            return fail("at least one marker is required".into());
        }
        for (i, m) in self.markers.iter().enumerate() {
            if self.markers[..i].iter().any(|o| o.name == m.name) {
                return fail(format!("marker {} listed twice", m.name));
            }
        }
        if self.markers.len() + 2 > self.n_layers {
            return fail(format!(
                "{} markers need at least {} layers, got {}",
                self.markers.len(),
                self.markers.len() + 2,
                self.n_layers
            ));
        }
        if !(0.0..0.9).contains(&self.trend_amplitude) {
            return fail("trend_amplitude must lie in [0, 0.9)".into());
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be positive".into());
        }
        if !(self.strong_step >= 3.0 && self.strong_step.is_finite()) {
            return fail("strong_step must be at least 3 noise levels".into());
        }
        if !(1.0..=1.5).contains(&self.subtle_ratio) {
            return fail("subtle_ratio must lie in [1, 1.5]".into());
        }
        // thinnest layer after trend and jitter must still hold the windows
        let thinnest = self.min_len as f64 / self.n_layers as f64 * 0.7 * (1.0 - self.trend_amplitude) * 0.85;
        if thinnest < MIN_LAYER_SAMPLES as f64 {
            return fail(format!(
                "wells of {} samples are too short for {} layers",
                self.min_len, self.n_layers
            ));
        }
        Ok(())
    }

    /// Layer boundary (index of the first layer below it) hosting each marker.
    fn marker_slots(&self) -> Vec<usize> {
        let m = self.markers.len();
        (0..m)
            .map(|i| ((i + 1) * self.n_layers + m.div_ceil(2)) / (m + 1))
            .collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2)
}

/// Stationary AR(1) generator with marginal standard deviation `std`.
struct Ar1 {
    state: f64,
}

impl Ar1 {
    fn next(&mut self, rng: &mut ChaCha8Rng, phi: f64, std: f64) -> f64 {
        self.state = phi * self.state + libm::sqrt(1.0 - phi * phi) * gaussian(rng);
        self.state * std
    }
}

/// Shared across wells: relative thicknesses, GR levels and per-layer offsets
/// of the secondary channels.
struct Template {
    weights: Vec<f64>,
    phases: Vec<f64>,
    levels: Vec<f64>,
    res_offset: Vec<f64>,
    den_offset: Vec<f64>,
}

impl Template {
    fn draw(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Template {
        let n = config.n_layers;
        let slots = config.marker_slots();
        let weights = (0..n).map(|_| rng.gen_range(0.7..1.3)).collect();
        let phases = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let mut levels = Vec::with_capacity(n);
        levels.push(rng.gen_range(70.0..90.0));
        let subtle_slots: Vec<usize> = slots
            .iter()
            .zip(&config.markers)
            .filter(|(_, m)| m.kind == MarkerKind::Subtle)
            .map(|(&s, _)| s)
            .collect();
        let mut strong_seen = 0usize;
        for l in 1..n {
            let marker = slots
                .iter()
                .position(|&s| s == l)
                .filter(|&i| config.markers[i].kind == MarkerKind::Strong);
            let mut magnitude = rng.gen_range(1.0..3.0);
            // a subtle marker sits mid-layer, so give its layer clear edges
            if subtle_slots.contains(&l) || subtle_slots.contains(&(l - 1)) {
                magnitude = SUBTLE_EDGE_STEP;
            }
            let coin: bool = rng.gen();
            let step = match marker {
                // strong markers alternate in sign so they can be told apart
                Some(_) => {
                    strong_seen += 1;
                    let sign = if strong_seen % 2 == 1 { 1.0 } else { -1.0 };
                    sign * config.strong_step
                }
                None => {
                    if coin {
                        magnitude
                    } else {
                        -magnitude
                    }
                }
            };
            let prev: f64 = levels[l - 1];
            let mut next = prev + step * config.noise_std;
            // keep GR in a plausible range by reflecting ordinary steps
            if marker.is_none() && !(30.0..=130.0).contains(&next) {
                next = prev - step * config.noise_std;
            }
            levels.push(next);
        }
        Template {
            weights,
            phases,
            levels,
            res_offset: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            den_offset: (0..n).map(|_| rng.gen_range(-0.03..0.03)).collect(),
        }
    }
}

/// Generates wells and their marker picks.
pub fn synthesize_wells(config: &SynthConfig) -> Result<(Vec<WellLog>, Vec<MarkerPick>), DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let template = Template::draw(config, &mut rng);
    let width = format!("{}", config.n_wells - 1).len().max(3);

    let mut wells = Vec::with_capacity(config.n_wells);
    let mut picks = Vec::with_capacity(config.n_wells * config.markers.len());
    for w in 0..config.n_wells {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(w as u64 + 1);
        let id = format!("SW{w:0width$}");
        let (well, marker_idx) = synth_well(config, &template, w, &id, &mut rng);
        for (spec, &idx) in config.markers.iter().zip(&marker_idx) {
            picks.push(MarkerPick {
                well_id: id.clone(),
                marker: spec.name.clone(),
                depth_ft: well.depth_at(idx),
            });
        }
        wells.push(well);
    }
    Ok((wells, picks))
}

fn synth_well(
    config: &SynthConfig,
    template: &Template,
    w: usize,
    id: &str,
    rng: &mut ChaCha8Rng,
) -> (WellLog, Vec<usize>) {
    let n_layers = config.n_layers;
    // transect position in [0, 1]
    let u = if config.n_wells > 1 {
        w as f64 / (config.n_wells - 1) as f64
    } else {
        0.5
    };
    let len = rng.gen_range(config.min_len..=config.max_len);

    let raw: Vec<f64> = (0..n_layers)
        .map(|l| {
            let trend = 1.0 + config.trend_amplitude * libm::sin(2.0 * PI * u + template.phases[l]);
            template.weights[l] * trend * rng.gen_range(0.85..1.15)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    // starts[l] = first sample of layer l; starts[n] = len
    let mut starts = Vec::with_capacity(n_layers + 1);
    let mut acc = 0.0;
    for r in &raw {
        starts.push(libm::round(acc / total * len as f64) as usize);
        acc += r;
    }
    starts.push(len);

    let levels: Vec<f64> = template
        .levels
        .iter()
        .map(|lv| lv + LEVEL_JITTER * config.noise_std * gaussian(rng))
        .collect();

    let slots = config.marker_slots();
    let mut marker_idx = Vec::with_capacity(config.markers.len());
    // rough texture runs from a subtle marker to the bottom of its layer
    let mut rough: Vec<(usize, usize)> = Vec::new();
    for (spec, &slot) in config.markers.iter().zip(&slots) {
        match spec.kind {
            MarkerKind::Strong => marker_idx.push(starts[slot]),
            MarkerKind::Subtle => {
                let frac = 0.5 + rng.gen_range(-SUBTLE_JITTER..SUBTLE_JITTER);
                let (lo, hi) = (starts[slot], starts[slot + 1]);
                let idx = lo + libm::round(frac * (hi - lo) as f64) as usize;
                marker_idx.push(idx);
                rough.push((idx, hi));
            }
        }
    }

    let n_ch = config.channels.len();
    let mut rows = vec![Vec::with_capacity(len); n_ch];
    let mut textures: Vec<Ar1> = (0..n_ch).map(|_| Ar1 { state: gaussian(rng) }).collect();
    let mut layer = 0;
    for t in 0..len {
        while t >= starts[layer + 1] {
            layer += 1;
        }
        let is_rough = rough.iter().any(|&(a, b)| t >= a && t < b);
        let (phi, scale) = if is_rough {
            // rougher and less correlated: larger sample-to-sample jumps
            // without moving the windowed mean
            (BASE_PHI / config.subtle_ratio, config.subtle_ratio)
        } else {
            (BASE_PHI, 1.0)
        };
        let gr_level = levels[layer];
        for (c, ch) in config.channels.iter().enumerate() {
            let (level, noise) = match ch {
                LogChannel::Gr => (gr_level, config.noise_std),
                LogChannel::Res => (
                    10.0 - 0.05 * (gr_level - 80.0) + template.res_offset[layer],
                    0.25,
                ),
                LogChannel::Den => (
                    2.45 + 0.002 * (gr_level - 80.0) + template.den_offset[layer],
                    0.015,
                ),
            };
            let texture = textures[c].next(rng, phi, noise * scale);
            let white = WHITE_SHARE * noise * gaussian(rng);
            rows[c].push(level + texture + white);
        }
    }

    let start_raw = 10_000.0 + 150.0 * u + rng.gen_range(-5.0..5.0);
    let depth_start = libm::round(start_raw / DEFAULT_DEPTH_STEP) * DEFAULT_DEPTH_STEP;
    let samples = Tensor::from_rows(&rows).expect("rows have equal length");
    (
        WellLog::new(id, depth_start, DEFAULT_DEPTH_STEP, config.channels.clone(), samples),
        marker_idx,
    )
}

/// `|mean(after) - mean(before)| / noise_std` over 20-sample windows either
/// side of `index` (the window after includes `index`). `None` if a window
/// would leave the sequence.
pub fn step_statistic(values: &[f64], index: usize, noise_std: f64) -> Option<f64> {
    if index < STAT_WINDOW || index + STAT_WINDOW > values.len() {
        return None;
    }
    let before = values[index - STAT_WINDOW..index].iter().sum::<f64>() / STAT_WINDOW as f64;
    let after = values[index..index + STAT_WINDOW].iter().sum::<f64>() / STAT_WINDOW as f64;
    Some((after - before).abs() / noise_std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pick_to_index;

    fn small() -> SynthConfig {
        SynthConfig {
            n_wells: 24,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = synthesize_wells(&small()).unwrap();
        let b = synthesize_wells(&small()).unwrap();
        assert_eq!(a, b);
        let c = synthesize_wells(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.0[0].samples, c.0[0].samples);
    }

    #[test]
    fn picks_are_valid_and_ordered() {
        let cfg = SynthConfig {
            channels: vec![LogChannel::Gr, LogChannel::Res, LogChannel::Den],
            ..small()
        };
        let (wells, picks) = synthesize_wells(&cfg).unwrap();
        assert_eq!(picks.len(), wells.len() * 3);
        for w in &wells {
            assert!((cfg.min_len..=cfg.max_len).contains(&w.len()));
            assert_eq!(w.samples.shape()[0], 3);
            assert!(w.samples.all_finite());
            let idx: Vec<usize> = picks
                .iter()
                .filter(|p| p.well_id == w.well_id)
                .map(|p| pick_to_index(p.depth_ft, w).unwrap())
                .collect();
            assert_eq!(idx.len(), 3);
            assert!(idx.windows(2).all(|p| p[0] < p[1]));
            // depth grid stays on whole half-feet
            assert_eq!(w.depth_start * 2.0, (w.depth_start * 2.0).round());
        }
    }

    #[test]
    fn strong_and_subtle_signatures() {
        let cfg = small();
        let (wells, picks) = synthesize_wells(&cfg).unwrap();
        for spec in &cfg.markers {
            let stats: Vec<f64> = wells
                .iter()
                .map(|w| {
                    let p = picks
                        .iter()
                        .find(|p| p.well_id == w.well_id && p.marker == spec.name)
                        .unwrap();
                    let idx = pick_to_index(p.depth_ft, w).unwrap();
                    step_statistic(w.samples.row(0), idx, cfg.noise_std).unwrap()
                })
                .collect();
            match spec.kind {
                MarkerKind::Strong => assert!(stats.iter().all(|&s| s >= 3.0), "{stats:?}"),
                MarkerKind::Subtle => {
                    let mean = stats.iter().sum::<f64>() / stats.len() as f64;
                    assert!(mean < 1.0, "subtle mean statistic {mean}");
                }
            }
        }
    }

    #[test]
    fn marker_depths_drift_smoothly() {
        let (wells, picks) = synthesize_wells(&small()).unwrap();
        let depth = |w: usize| {
            picks
                .iter()
                .find(|p| p.well_id == wells[w].well_id && p.marker == "UB000")
                .unwrap()
                .depth_ft
        };
        let jumps: Vec<f64> = (1..wells.len()).map(|w| (depth(w) - depth(w - 1)).abs()).collect();
        let spread = (0..wells.len()).map(depth).fold(f64::MIN, f64::max)
            - (0..wells.len()).map(depth).fold(f64::MAX, f64::min);
        assert!(spread > 0.0);
        assert!(jumps.iter().all(|&j| j < spread));
    }

    #[test]
    fn rejects_contradictory_configs() {
        let too_dense = SynthConfig {
            n_layers: 4,
            ..SynthConfig::default()
        };
        assert!(matches!(too_dense.validate(), Err(DataError::SynthConfig(_))));
        let too_short = SynthConfig {
            min_len: 200,
            max_len: 300,
            ..SynthConfig::default()
        };
        assert!(too_short.validate().is_err());
        let loud_subtle = SynthConfig {
            subtle_ratio: 2.0,
            ..SynthConfig::default()
        };
        assert!(loud_subtle.validate().is_err());
        assert!(MarkerSpec::parse_list("UB000:bold").is_err());
        assert!(MarkerSpec::parse_list("UB000").is_err());
    }

    #[test]
    fn marker_list_round_trip() {
        let list = SynthConfig::default().markers;
        assert_eq!(MarkerSpec::parse_list(&MarkerSpec::format_list(&list)).unwrap(), list);
    }

    #[test]
    fn step_statistic_on_clean_step() {
        let mut v = vec![0.0; 40];
        v.extend(vec![12.0; 40]);
        assert_eq!(step_statistic(&v, 40, 4.0), Some(3.0));
        assert_eq!(step_statistic(&v, 10, 4.0), None);
        assert_eq!(step_statistic(&v, 61, 4.0), None);
    }
}

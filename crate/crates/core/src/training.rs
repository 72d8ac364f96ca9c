//! Dataset splitting, Adam, early stopping and the per-marker training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError};
use crate::data::{normalize_wells, pick_to_index, Checkpoint, DataError, Dataset, LogChannel, WellLog};
use crate::layers::Mode;
use crate::net::{AblationMode, MarkerNet, NetConfig, NetError};
use crate::supervision::{bce_loss, marker_target, LabelError, DEFAULT_SIGMA};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("need at least 3 wells to split, got {0}")]
    TooFewWells(usize),
    #[error("no {split} wells carry a pick for marker `{marker}`")]
    NoLabeledWells { split: &'static str, marker: String },
    #[error("optimizer state covers {expected} tensors, got {found}")]
    StateMismatch { expected: usize, found: usize },
    #[error("gradient shape {found:?} does not match parameter shape {expected:?}")]
    GradientShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("well `{well}`: {source}")]
    Well {
        well: String,
        #[source]
        source: NetError,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Share of all wells held out for testing.
    pub test_fraction: f64,
    /// Share of the remaining wells used for validation.
    pub val_fraction: f64,
    pub mode: AblationMode,
    /// Gaussian label smoothing on or off.
    pub smoothing: bool,
    /// Smoothing scale in samples.
    pub sigma: f64,
    /// Log channels fed to the network, in order.
    pub channels: Vec<LogChannel>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 200,
            patience: 10,
            seed: 42,
            test_fraction: 0.2,
            val_fraction: 0.25,
            mode: AblationMode::Combined,
            smoothing: true,
            sigma: DEFAULT_SIGMA,
            channels: vec![LogChannel::Gr],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 {
            return fail("adam_eps must be positive".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if self.smoothing && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.channels.is_empty() {
            return fail("at least one channel is required".into());
        }
        Ok(())
    }

    /// Smoothing scale passed to [`marker_target`].
    pub fn label_sigma(&self) -> Option<f64> {
        self.smoothing.then_some(self.sigma)
    }
}

/// Indices into the well list, one vector per role.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into train/val/test.
///
/// Test takes `round(n · test_fraction)`, validation
/// `round((n − test) · val_fraction)`, training the remainder; each part keeps
/// at least one well.
pub fn split_dataset(n: usize, test_fraction: f64, val_fraction: f64, seed: u64) -> Result<Split, TrainError> {
    if n < 3 {
        return Err(TrainError::TooFewWells(n));
    }
    let test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 2);
    let val = (((n - test) as f64 * val_fraction).round() as usize).clamp(1, n - test - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let test_idx = order[..test].to_vec();
    let val_idx = order[test..test + val].to_vec();
    let train_idx = order[test + val..].to_vec();
    Ok(Split {
        train: train_idx,
        val: val_idx,
        test: test_idx,
    })
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update. A `None` gradient counts as zero.
pub fn optimizer_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::StateMismatch {
            expected: params.len(),
            found: grads.len().min(state.m.len()),
        });
    }
    state.step += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_ref();
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(TrainError::GradientShape {
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let gj = g.map_or(0.0, |g| g.data()[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            pd[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss and how long it has gone unbeaten.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    stale: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
            epoch: 0,
        }
    }

    /// Records one completed epoch (numbered from 1).
    pub fn update(&mut self, val_loss: f64) -> StopDecision {
        self.epoch += 1;
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = self.epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    /// Validation loss of the freshly initialized network.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .map_or(f64::NAN, |e| e.val_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// A normalized input paired with its target curve.
#[derive(Clone, Debug)]
pub struct Example {
    pub well_id: String,
    pub input: Tensor,
    pub target: Vec<f64>,
}

/// Gradient steps on a single network.
pub struct Trainer {
    pub net: MarkerNet,
    config: TrainConfig,
    state: AdamState,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// The dropout stream is derived from `config.seed`.
    pub fn new(net: MarkerNet, config: TrainConfig) -> Self {
        let state = AdamState::new(net.params().tensors());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(3);
        Trainer {
            net,
            config,
            state,
            rng,
        }
    }

    /// One forward/backward/update on one well; returns the loss before the update.
    pub fn step(&mut self, example: &Example) -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let (params, out) = self
            .net
            .forward(&mut tape, &example.input, Mode::Train, &mut self.rng)
            .map_err(|source| TrainError::Well {
                well: example.well_id.clone(),
                source,
            })?;
        let loss = tape.bce(out.prob, &example.target)?;
        let value = tape.value(loss).item()?;
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Option<Tensor>> = params.iter().map(|&p| grads.take(p)).collect();
        optimizer_step(self.net.params_mut().tensors_mut(), &grads, &mut self.state, &self.config)?;
        Ok(value)
    }
}

/// Mean eval-mode BCE over `examples`.
pub fn mean_loss(net: &MarkerNet, examples: &[Example]) -> Result<f64, TrainError> {
    let losses = examples
        .par_iter()
        .map(|ex| {
            let p = net.predict_eval(&ex.input).map_err(|source| TrainError::Well {
                well: ex.well_id.clone(),
                source,
            })?;
            Ok(bce_loss(&p, &ex.target)?)
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub split: Split,
    /// Train/val wells left out for lacking a pick.
    pub skipped: Vec<String>,
}

/// Restricts every well to `channels`, failing on the first that lacks one.
pub fn select_channels(wells: &[WellLog], channels: &[LogChannel]) -> Result<Vec<WellLog>, DataError> {
    wells.iter().map(|w| w.select_channels(channels)).collect()
}

fn examples_for(
    dataset: &Dataset,
    wells: &[WellLog],
    indices: &[usize],
    marker: &str,
    sigma: Option<f64>,
    skipped: &mut Vec<String>,
) -> Result<Vec<Example>, TrainError> {
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let well = &wells[i];
        let Some(pick) = dataset.pick(&well.well_id, marker) else {
            warn!("well {} has no {marker} pick; skipped", well.well_id);
            skipped.push(well.well_id.clone());
            continue;
        };
        let index = pick_to_index(pick.depth_ft, well)?;
        out.push(Example {
            well_id: well.well_id.clone(),
            input: well.samples.clone(),
            target: marker_target(well.len(), index, sigma)?,
        });
    }
    Ok(out)
}

/// Trains one model for `marker` and returns the weights from the epoch with
/// the lowest validation loss.
pub fn train_marker_model(
    dataset: &Dataset,
    marker: &str,
    net_config: &NetConfig,
    config: &TrainConfig,
) -> Result<TrainedModel, TrainError> {
    config.validate()?;
    if net_config.input_channels != config.channels.len() {
        return Err(TrainError::Config(format!(
            "network expects {} input channels but {} were selected",
            net_config.input_channels,
            config.channels.len()
        )));
    }
    let wells = select_channels(&dataset.wells, &config.channels)?;
    let split = split_dataset(wells.len(), config.test_fraction, config.val_fraction, config.seed)?;
    let train_wells: Vec<WellLog> = split.train.iter().map(|&i| wells[i].clone()).collect();
    let (normalized, norm) = normalize_wells(&train_wells, &wells);

    let sigma = config.label_sigma();
    let mut skipped = Vec::new();
    let train = examples_for(dataset, &normalized, &split.train, marker, sigma, &mut skipped)?;
    let val = examples_for(dataset, &normalized, &split.val, marker, sigma, &mut skipped)?;
    if train.is_empty() {
        return Err(TrainError::NoLabeledWells {
            split: "training",
            marker: marker.into(),
        });
    }
    if val.is_empty() {
        return Err(TrainError::NoLabeledWells {
            split: "validation",
            marker: marker.into(),
        });
    }

    let names = config.channels.iter().map(|c| c.as_str().to_string()).collect();
    let net = MarkerNet::new(marker, names, net_config.clone(), config.mode, config.seed)?;
    let (history, net) = fit(net, &train, &val, config)?;
    info!(
        "{marker}: best epoch {} of {}, val loss {:.5}",
        history.best_epoch,
        history.stopped_epoch,
        history.best_val_loss()
    );
    Ok(TrainedModel {
        checkpoint: Checkpoint { net, norm },
        history,
        split,
        skipped,
    })
}

/// The epoch loop: shuffled single-well steps, validation, early stopping.
pub fn fit(
    net: MarkerNet,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
) -> Result<(TrainHistory, MarkerNet), TrainError> {
    let initial_val_loss = mean_loss(&net, val)?;
    let mut best = net.params().clone();
    let mut trainer = Trainer::new(net, config.clone());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(2);
    let mut epochs = Vec::new();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for &i in &order {
            total += trainer.step(&train[i])?;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = mean_loss(&trainer.net, val)?;
        debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        match stopper.update(val_loss) {
            StopDecision::Improved => best = trainer.net.params().clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    let stopped_epoch = epochs.len();
    let mut net = trainer.net;
    *net.params_mut() = best;
    Ok((
        TrainHistory {
            initial_val_loss,
            epochs,
            best_epoch: stopper.best_epoch,
            stopped_epoch,
        },
        net,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn split_sizes_and_partition() {
        let s = split_dataset(10, 0.2, 0.25, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let all: HashSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        assert_eq!(all, (0..10).collect());
        assert_eq!(split_dataset(10, 0.2, 0.25, 1).unwrap(), s);
        assert_ne!(split_dataset(10, 0.2, 0.25, 2).unwrap(), s);

        let s = split_dataset(80, 0.2, 0.25, 42).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (48, 16, 16));
        let s = split_dataset(3, 0.2, 0.25, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
        assert!(matches!(split_dataset(2, 0.2, 0.25, 0), Err(TrainError::TooFewWells(2))));
    }

    fn one_param(v: Vec<f64>) -> Vec<Tensor> {
        vec![Tensor::from_vec(v)]
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let cfg = TrainConfig::default();
        let mut p = one_param(vec![1.0, -2.0]);
        let mut state = AdamState::new(&p);
        state.m[0] = Tensor::from_vec(vec![0.5, 0.5]);
        state.v[0] = Tensor::from_vec(vec![0.25, 0.25]);
        let before = p.clone();
        optimizer_step(&mut p, &[Some(Tensor::zeros(&[2]))], &mut state, &cfg).unwrap();
        // moments decay but are nonzero, so only an all-zero history is a no-op
        assert_eq!(state.m[0].data(), &[0.45, 0.45]);
        assert!((state.v[0].data()[0] - 0.24975).abs() < 1e-15);

        let mut fresh = AdamState::new(&before);
        let mut q = before.clone();
        optimizer_step(&mut q, &[None], &mut fresh, &cfg).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let cfg = TrainConfig::default();
        let mut p = one_param(vec![0.0, 0.0, 0.0]);
        let mut state = AdamState::new(&p);
        let g = Tensor::from_vec(vec![3.0, -0.01, 250.0]);
        optimizer_step(&mut p, &[Some(g.clone())], &mut state, &cfg).unwrap();
        for (x, gv) in p[0].data().iter().zip(g.data()) {
            // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + eps)
            let expected = -1e-3 * gv / (gv.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15);
        }
        let first = p[0].clone();
        optimizer_step(&mut p, &[Some(g.clone())], &mut state, &cfg).unwrap();
        for ((x, f), gv) in p[0].data().iter().zip(first.data()).zip(g.data()) {
            assert!((x - f) * gv.signum() < 0.0);
        }
    }

    #[test]
    fn adam_shape_checks() {
        let cfg = TrainConfig::default();
        let mut p = one_param(vec![0.0, 0.0]);
        let mut state = AdamState::new(&p);
        assert!(matches!(
            optimizer_step(&mut p, &[Some(Tensor::zeros(&[3]))], &mut state, &cfg),
            Err(TrainError::GradientShape { .. })
        ));
        assert!(matches!(
            optimizer_step(&mut p, &[], &mut state, &cfg),
            Err(TrainError::StateMismatch { .. })
        ));
    }

    #[test]
    fn patience_one_stops_after_two_worsening_epochs() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.update(1.0), StopDecision::Improved);
        assert_eq!(s.update(1.5), StopDecision::Stop);
        assert_eq!(s.best_epoch, 1);

        let mut s = EarlyStopping::new(3);
        let decisions: Vec<_> = [1.0, 0.8, 0.9, 0.85, 0.8, 0.7].iter().map(|&v| s.update(v)).collect();
        use StopDecision::*;
        assert_eq!(decisions, vec![Improved, Improved, Continue, Continue, Stop, Improved]);
        assert_eq!(s.best_epoch, 6);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { patience: 0, ..TrainConfig::default() },
            TrainConfig { test_fraction: 1.0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig { channels: vec![], ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainHistory {
            initial_val_loss: 0.7,
            epochs: vec![
                EpochRecord { epoch: 1, train_loss: 0.5, val_loss: 0.4 },
                EpochRecord { epoch: 2, train_loss: 0.25, val_loss: 0.375 },
            ],
            best_epoch: 2,
            stopped_epoch: 2,
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,val_loss\n1,0.5,0.4\n2,0.25,0.375\n");
        assert_eq!(h.best_val_loss(), 0.375);
    }
}

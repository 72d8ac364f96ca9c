//! The soft-attention marker network.
//!
//! A global view (U-Net style encoder/decoder with concatenated skips and a
//! tanh projection) gates a local view (stack of dilated inception units with
//! a linear projection) by elementwise product. A 1×1 convolution and a
//! sigmoid turn the fused features into a per-depth marker probability.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::layers::{avg_pool, upsample_linear, Conv1dLayer, ConvUnit, Init, Mode, ParamStore};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("input length {len} is below the minimum {min} for encoder depth {depth}")]
    InputTooShort { len: usize, min: usize, depth: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which sub-network feeds the detection head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationMode {
    /// Head applied to `G ⊙ L`.
    Combined,
    /// Head applied to `G` alone.
    GlobalOnly,
    /// Head applied to `L` alone.
    LocalOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::GlobalOnly, AblationMode::LocalOnly, AblationMode::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Combined => "combined",
            AblationMode::GlobalOnly => "global",
            AblationMode::LocalOnly => "local",
        }
    }

    fn uses_global(self) -> bool {
        self != AblationMode::LocalOnly
    }

    fn uses_local(self) -> bool {
        self != AblationMode::GlobalOnly
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "combined" => Ok(AblationMode::Combined),
            "global" | "global_only" => Ok(AblationMode::GlobalOnly),
            "local" | "local_only" => Ok(AblationMode::LocalOnly),
            other => Err(format!("unknown mode `{other}` (expected combined, global or local)")),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub input_channels: usize,
    /// Number of pooling stages in the global view.
    pub encoder_depth: usize,
    /// Channel width of each encoder stage (and its mirrored decoder stage).
    pub stage_channels: Vec<usize>,
    /// Inception kernel sizes used at every global-view stage.
    pub global_kernels: Vec<usize>,
    pub local_layers: usize,
    pub local_channels: usize,
    pub local_kernel: usize,
    pub local_dilations: Vec<usize>,
    /// Width `F` shared by the global and local outputs.
    pub fusion_channels: usize,
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_channels: 1,
            encoder_depth: 3,
            stage_channels: vec![16, 32, 64],
            global_kernels: vec![3, 7, 11],
            local_layers: 4,
            local_channels: 32,
            local_kernel: 3,
            local_dilations: vec![1, 2, 4],
            fusion_channels: 32,
            dropout: 0.1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |msg: String| Err(NetError::Config(msg));
        if !(1..=3).contains(&self.input_channels) {
            return fail(format!("input_channels must be 1..=3, got {}", self.input_channels));
        }
        if self.encoder_depth == 0 || self.stage_channels.len() != self.encoder_depth {
            return fail(format!(
                "stage_channels has {} entries for encoder depth {}",
                self.stage_channels.len(),
                self.encoder_depth
            ));
        }
        if self.global_kernels.is_empty() || self.global_kernels.iter().any(|k| k % 2 == 0) {
            return fail(format!("global kernels must be odd, got {:?}", self.global_kernels));
        }
        if self.stage_channels.iter().any(|&c| c < self.global_kernels.len()) {
            return fail("every stage needs at least one channel per inception branch".into());
        }
        if self.local_layers == 0 || self.local_kernel.is_multiple_of(2) {
            return fail("local view needs at least one layer and an odd kernel".into());
        }
        if self.local_dilations.is_empty()
            || self.local_dilations.contains(&0)
            || self.local_channels < self.local_dilations.len()
        {
            return fail(format!("bad local dilations {:?}", self.local_dilations));
        }
        if self.fusion_channels == 0 {
            return fail("fusion_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Shortest sequence the global view accepts.
    pub fn min_length(&self) -> usize {
        1 << self.encoder_depth
    }
}

/// Encoder/decoder with skip connections ending in a tanh projection.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalView {
    encoder: Vec<ConvUnit>,
    /// `decoder[i]` runs at the resolution of `encoder[i]`.
    decoder: Vec<ConvUnit>,
    projection: Conv1dLayer,
}

/// Length-preserving stack of dilated inception units ending in a linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalView {
    layers: Vec<ConvUnit>,
    projection: Conv1dLayer,
}

/// Output handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// `[1, T]` per-depth probabilities.
    pub prob: Var,
    pub global: Option<Var>,
    pub local: Option<Var>,
    pub fused: Option<Var>,
}

/// One model per marker: parameters, architecture and head wiring.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkerNet {
    pub marker: String,
    /// Input log names in column order, e.g. `["GR", "RES"]`.
    pub channels: Vec<String>,
    pub config: NetConfig,
    pub mode: AblationMode,
    params: ParamStore,
    global: GlobalView,
    local: LocalView,
    head: Conv1dLayer,
}

impl MarkerNet {
    pub fn new(
        marker: impl Into<String>,
        channels: Vec<String>,
        config: NetConfig,
        mode: AblationMode,
        seed: u64,
    ) -> Result<Self, NetError> {
        config.validate()?;
        if channels.len() != config.input_channels {
            return Err(NetError::Config(format!(
                "{} channel names for {} input channels",
                channels.len(),
                config.input_channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = config.dropout;

        let global_taps: Vec<(usize, usize)> = config.global_kernels.iter().map(|&k| (k, 1)).collect();
        let depth = config.encoder_depth;
        let mut encoder = Vec::with_capacity(depth);
        let mut in_ch = config.input_channels;
        for (i, &width) in config.stage_channels.iter().enumerate() {
            encoder.push(ConvUnit::new(&mut store, &format!("global.enc{i}"), in_ch, width, &global_taps, p, &mut rng));
            in_ch = width;
        }
        let mut decoder = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            let below = config.stage_channels[(i + 1).min(depth - 1)];
            let width = config.stage_channels[i];
            decoder.push(ConvUnit::new(
                &mut store,
                &format!("global.dec{i}"),
                below + width,
                width,
                &global_taps,
                p,
                &mut rng,
            ));
        }
        decoder.reverse();
        let projection = Conv1dLayer::new(
            &mut store,
            "global.proj",
            config.stage_channels[0],
            config.fusion_channels,
            1,
            1,
            Init::Glorot,
            &mut rng,
        );
        let global = GlobalView {
            encoder,
            decoder,
            projection,
        };

        let local_taps: Vec<(usize, usize)> = config.local_dilations.iter().map(|&d| (config.local_kernel, d)).collect();
        let mut layers = Vec::with_capacity(config.local_layers);
        let mut in_ch = config.input_channels;
        for i in 0..config.local_layers {
            layers.push(ConvUnit::new(
                &mut store,
                &format!("local.l{i}"),
                in_ch,
                config.local_channels,
                &local_taps,
                p,
                &mut rng,
            ));
            in_ch = config.local_channels;
        }
        let projection = Conv1dLayer::new(
            &mut store,
            "local.proj",
            config.local_channels,
            config.fusion_channels,
            1,
            1,
            Init::Glorot,
            &mut rng,
        );
        let local = LocalView { layers, projection };

        let head = Conv1dLayer::new(&mut store, "head", config.fusion_channels, 1, 1, 1, Init::Glorot, &mut rng);

        Ok(MarkerNet {
            marker: marker.into(),
            channels,
            config,
            mode,
            params: store,
            global,
            local,
            head,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Global view: `[C_in, T] -> [F, T]`, every value in `(-1, 1)`.
    pub fn global_forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, NetError> {
        let len = self.check_input(tape, x)?;
        let depth = self.config.encoder_depth;
        let block = 1usize << depth;
        let padded = len.div_ceil(block) * block;
        let mut h = if padded == len { x } else { tape.window(x, 0, padded)? };

        let mut skips = Vec::with_capacity(depth);
        for unit in &self.global.encoder {
            h = unit.forward(tape, params, h, mode, rng)?;
            skips.push(h);
            h = avg_pool(tape, h)?;
        }
        for (unit, skip) in self.global.decoder.iter().zip(skips).rev() {
            h = upsample_linear(tape, h)?;
            h = tape.concat(&[h, skip], 0)?;
            h = unit.forward(tape, params, h, mode, rng)?;
        }
        let h = self.global.projection.forward(tape, params, h)?;
        let g = tape.tanh(h);
        Ok(if padded == len { g } else { tape.window(g, 0, len)? })
    }

    /// Local view: `[C_in, T] -> [F, T]`, unbounded.
    pub fn local_forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, NetError> {
        self.check_channels(tape, x)?;
        let mut h = x;
        for unit in &self.local.layers {
            h = unit.forward(tape, params, h, mode, rng)?;
        }
        Ok(self.local.projection.forward(tape, params, h)?)
    }

    /// Full forward pass on already-bound parameters.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NetOutput, NetError> {
        self.check_input(tape, x)?;
        let global = if self.mode.uses_global() {
            Some(self.global_forward(tape, params, x, mode, rng)?)
        } else {
            None
        };
        let local = if self.mode.uses_local() {
            Some(self.local_forward(tape, params, x, mode, rng)?)
        } else {
            None
        };
        let (features, fused) = match (global, local) {
            (Some(g), Some(l)) => {
                let a = attention_fuse(tape, g, l)?;
                (a, Some(a))
            }
            (Some(g), None) => (g, None),
            (None, Some(l)) => (l, None),
            (None, None) => unreachable!("every mode uses at least one view"),
        };
        let logits = self.head.forward(tape, params, features)?;
        let prob = tape.sigmoid(logits);
        Ok(NetOutput {
            prob,
            global,
            local,
            fused,
        })
    }

    /// Binds the parameters onto `tape` and runs the full network.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Var>, NetOutput), NetError> {
        let params = self.params.bind(tape);
        let xv = tape.constant(x.clone());
        let out = self.forward_bound(tape, &params, xv, mode, rng)?;
        Ok((params, out))
    }

    /// Per-depth marker probabilities for a `[C_in, T]` input.
    pub fn predict(&self, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, NetError> {
        let mut tape = Tape::new();
        let (_, out) = self.forward(&mut tape, x, mode, rng)?;
        Ok(tape.value(out.prob).data().to_vec())
    }

    /// Deterministic eval-mode probabilities.
    pub fn predict_eval(&self, x: &Tensor) -> Result<Vec<f64>, NetError> {
        self.predict(x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Eval-mode global features averaged over the feature axis.
    pub fn attention_scores(&self, x: &Tensor) -> Result<Vec<f64>, NetError> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = self.global_forward(&mut tape, &params, xv, Mode::Eval, &mut rng)?;
        let scores = tape.reduce(crate::autodiff::ReduceKind::Mean, g, Some(0))?;
        Ok(tape.value(scores).data().to_vec())
    }

    fn check_channels(&self, tape: &Tape, x: Var) -> Result<usize, NetError> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape(shape.to_vec()).into());
        }
        if shape[0] != self.config.input_channels {
            return Err(TensorError::ChannelMismatch {
                expected: self.config.input_channels,
                found: shape[0],
            }
            .into());
        }
        Ok(shape[1])
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<usize, NetError> {
        let len = self.check_channels(tape, x)?;
        let min = self.config.min_length();
        if len < min {
            return Err(NetError::InputTooShort {
                len,
                min,
                depth: self.config.encoder_depth,
            });
        }
        Ok(len)
    }

    /// Rebuilds a network from a stored parameter set, checking names and shapes.
    pub fn with_params(
        marker: impl Into<String>,
        channels: Vec<String>,
        config: NetConfig,
        mode: AblationMode,
        params: Vec<(String, Tensor)>,
    ) -> Result<Self, NetError> {
        let mut net = MarkerNet::new(marker, channels, config, mode, 0)?;
        if params.len() != net.params.len() {
            return Err(NetError::Config(format!(
                "expected {} parameter tensors, found {}",
                net.params.len(),
                params.len()
            )));
        }
        for (i, (name, tensor)) in params.into_iter().enumerate() {
            let expected_name = net.params.names()[i].clone();
            let slot = &mut net.params.tensors_mut()[i];
            if name != expected_name || tensor.shape() != slot.shape() {
                return Err(NetError::Config(format!(
                    "parameter {i}: expected {expected_name} {:?}, found {name} {:?}",
                    slot.shape(),
                    tensor.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(net)
    }
}

/// Soft attention: `A = G ⊙ L`.
pub fn attention_fuse(tape: &mut Tape, global: Var, local: Var) -> Result<Var, TensorError> {
    tape.mul(global, local)
}

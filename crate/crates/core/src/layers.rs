//! One-dimensional building blocks: convolution, pooling, upsampling, layer
//! normalization, dropout and inception blocks.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`] rather than tensors. A
//! forward pass first binds the store onto a [`Tape`] (one [`Var`] per
//! parameter) and then threads the bound handles through each layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, TensorError, Var};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }
}

/// How stochastic layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Inference statistics with dropout left on, for MC-dropout sampling.
    McDropout,
}

impl Mode {
    pub fn dropout_active(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// Uniform initializer with bound `sqrt(6 / fan)`.
fn uniform_init(shape: &[usize], fan: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-uniform, for layers followed by a ReLU.
    He,
    /// Glorot-uniform, for linear or squashing projections.
    Glorot,
}

/// "Same"-padded, stride-1, optionally dilated 1D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
}

impl Conv1dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(kernel_size % 2 == 1, "kernel size must be odd");
        assert!(dilation >= 1, "dilation must be at least 1");
        let fan_in = in_channels * kernel_size;
        let fan = match init {
            Init::He => fan_in,
            Init::Glorot => fan_in + out_channels * kernel_size,
        };
        let w = uniform_init(&[out_channels, in_channels, kernel_size], fan, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv1dLayer {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel_size,
            dilation,
        }
    }

    /// `[C_in, T] -> [C_out, T]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, TensorError> {
        tape.conv1d(x, params[self.weight.0], params[self.bias.0], self.dilation)
    }
}

/// Halves the length by averaging non-overlapping pairs.
pub fn avg_pool(tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
    tape.avg_pool2(x)
}

/// Doubles the length by linear interpolation.
pub fn upsample_linear(tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
    tape.upsample2(x)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-position normalization across channels with a learned affine.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        LayerNorm {
            gamma,
            beta,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, params[self.gamma.0], params[self.beta.0], self.eps)
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        Dropout { rate }
    }

    /// Identity in [`Mode::Eval`] or when the rate is zero; otherwise draws a
    /// fresh mask from `rng`.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var, TensorError> {
        if !mode.dropout_active() || self.rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..tape.value(x).len())
            .map(|_| if rng.gen::<f64>() < self.rate { 0.0 } else { scale })
            .collect();
        tape.dropout(x, mask)
    }
}

/// Parallel convolutions over the same input whose outputs are stacked
/// along the channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct InceptionBlock {
    pub branches: Vec<Conv1dLayer>,
}

impl InceptionBlock {
    /// Builds one branch per `(kernel_size, dilation)` pair, splitting
    /// `out_channels` as evenly as possible (earlier branches get the extra).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        taps: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(!taps.is_empty() && out_channels >= taps.len());
        let base = out_channels / taps.len();
        let extra = out_channels % taps.len();
        let branches = taps
            .iter()
            .enumerate()
            .map(|(i, &(k, d))| {
                let width = base + usize::from(i < extra);
                Conv1dLayer::new(store, &format!("{name}.b{i}"), in_channels, width, k, d, Init::He, rng)
            })
            .collect();
        InceptionBlock { branches }
    }

    pub fn from_branches(branches: Vec<Conv1dLayer>) -> Self {
        InceptionBlock { branches }
    }

    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(|b| b.out_channels).sum()
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, TensorError> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(tape, params, x))
            .collect::<Result<Vec<_>, _>>()?;
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        tape.concat(&outs, 0)
    }
}

/// Inception convolution followed by layer norm, ReLU and dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub inception: InceptionBlock,
    pub norm: LayerNorm,
    pub dropout: Dropout,
}

impl ConvUnit {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        taps: &[(usize, usize)],
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let inception = InceptionBlock::new(store, &format!("{name}.conv"), in_channels, out_channels, taps, rng);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), out_channels);
        ConvUnit {
            inception,
            norm,
            dropout: Dropout::new(dropout),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.inception.out_channels()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, TensorError> {
        let h = self.inception.forward(tape, params, x)?;
        let h = self.norm.forward(tape, params, h)?;
        let h = tape.relu(h);
        self.dropout.forward(tape, h, mode, rng)
    }
}

//! Flat gradient tape for reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward sweep. Nodes only ever reference earlier nodes, so a
//! single reverse pass over the node list visits them in topological order.

use super::{kernels, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Activation {
        kind: Activation,
        x: Var,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        axis: Option<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    /// Crop or zero-pad along the length axis of a `[C, T]` value.
    Window {
        x: Var,
        offset: isize,
    },
    Conv1d {
        x: Var,
        weight: Var,
        bias: Var,
        dilation: usize,
    },
    AvgPool2 {
        x: Var,
    },
    Upsample2 {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by the handles of the
/// forward pass that produced them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Lower bound applied to probabilities inside the cross-entropy.
pub const BCE_CLAMP: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.all_finite() || !self.inputs_finite(&op),
            "non-finite output from {op:?} on finite inputs"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &Op) -> bool {
        let check = |v: &Var| self.nodes[v.0].value.all_finite();
        match op {
            Op::Leaf => true,
            Op::Binary { a, b, .. } => check(a) && check(b),
            Op::Concat { parts, .. } => parts.iter().all(check),
            Op::Conv1d {
                x, weight, bias, ..
            } => check(x) && check(weight) && check(bias),
            Op::LayerNorm { x, gamma, beta, .. } => check(x) && check(gamma) && check(beta),
            Op::Activation { x, .. }
            | Op::Reduce { x, .. }
            | Op::Window { x, .. }
            | Op::AvgPool2 { x }
            | Op::Upsample2 { x }
            | Op::Dropout { x, .. } => check(x),
            Op::Bce { p, .. } => check(p),
        }
    }

    /// Records a value that needs no gradient (inputs, targets, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf; backward produces a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let op = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| op(x, y)).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        } else if bv.is_scalar() {
            let s = bv.data()[0];
            let data = av.data().iter().map(|&x| op(x, s)).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        } else if av.is_scalar() {
            let s = av.data()[0];
            let data = bv.data().iter().map(|&y| op(s, y)).collect();
            Tensor::from_parts(bv.shape().to_vec(), data)
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        };
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, Op::Binary { kind, a, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let xv = self.value(x);
        let data: Vec<f64> = match kind {
            Activation::Tanh => xv.data().iter().map(|v| v.tanh()).collect(),
            Activation::Sigmoid => xv.data().iter().map(|&v| stable_sigmoid(v)).collect(),
            Activation::Relu => xv.data().iter().map(|&v| v.max(0.0)).collect(),
        };
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let needs = self.needs_grad(x);
        self.push(out, Op::Activation { kind, x }, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    /// Sum or mean over one axis, or over everything when `axis` is `None`.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let out = match axis {
            None => {
                let s: f64 = xv.data().iter().sum();
                let v = match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / xv.len() as f64,
                };
                Tensor::scalar(v)
            }
            Some(ax) => {
                if ax >= xv.rank() {
                    return Err(TensorError::AxisOutOfRange {
                        axis: ax,
                        rank: xv.rank(),
                    });
                }
                let (outer, extent, inner) = split_axis(xv.shape(), ax);
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    let dst = &mut data[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        let start = (o * extent + e) * inner;
                        for (d, s) in dst.iter_mut().zip(&xv.data()[start..start + inner]) {
                            *d += s;
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = 1.0 / extent as f64;
                    data.iter_mut().for_each(|v| *v *= inv);
                }
                let mut shape = xv.shape().to_vec();
                shape.remove(ax);
                Tensor::from_parts(shape, data)
            }
        };
        let needs = self.needs_grad(x);
        Ok(self.push(out, Op::Reduce { kind, x, axis }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(ReduceKind::Sum, x, None)
            .expect("full reduction is infallible")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(ReduceKind::Mean, x, None)
            .expect("full reduction is infallible")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::EmptyConcat);
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let block = pv.shape()[axis] * inner;
                data.extend_from_slice(&pv.data()[o * block..(o + 1) * block]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Takes `len` positions of a `[C, T]` value starting at `offset`.
    ///
    /// Positions outside `[0, T)` read as zero, so a negative offset or a
    /// window running past the end pads while an interior window crops.
    pub fn window(&mut self, x: Var, offset: isize, len: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.rank() != 2 || len == 0 {
            return Err(TensorError::InvalidShape(xv.shape().to_vec()));
        }
        let (channels, width) = (xv.shape()[0], xv.shape()[1]);
        let mut data = vec![0.0; channels * len];
        let (lo, hi) = overlap(offset, len, width);
        for c in 0..channels {
            let src = xv.row(c);
            let dst = &mut data[c * len..(c + 1) * len];
            for t in lo..hi {
                dst[t] = src[(t as isize + offset) as usize];
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![channels, len], data),
            Op::Window { x, offset },
            needs,
        ))
    }

    /// "Same"-padded stride-1 dilated convolution.
    ///
    /// `x` is `[C_in, T]`, `weight` is `[C_out, C_in, K]` with odd `K`, and
    /// `bias` is `[C_out]`. Output is `[C_out, T]`.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var, TensorError> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        if xv.rank() != 2 || wv.rank() != 3 || bv.shape() != [wv.shape()[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        if xv.shape()[0] != wv.shape()[1] {
            return Err(TensorError::ChannelMismatch {
                expected: wv.shape()[1],
                found: xv.shape()[0],
            });
        }
        if wv.shape()[2] % 2 == 0 || dilation == 0 {
            return Err(TensorError::InvalidKernel {
                kernel: wv.shape()[2],
                dilation,
            });
        }
        let out = kernels::conv1d_forward(xv, wv, bv, dilation);
        let needs = self.needs_grad(x) || self.needs_grad(weight) || self.needs_grad(bias);
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                weight,
                bias,
                dilation,
            },
            needs,
        ))
    }

    /// Non-overlapping mean over pairs along the length axis; an odd trailing
    /// sample becomes its own window.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(TensorError::InvalidShape(xv.shape().to_vec()));
        }
        let (channels, width) = (xv.shape()[0], xv.shape()[1]);
        let half = width.div_ceil(2);
        let mut data = Vec::with_capacity(channels * half);
        for c in 0..channels {
            let row = xv.row(c);
            let mut pairs = row.chunks_exact(2);
            data.extend(pairs.by_ref().map(|p| 0.5 * (p[0] + p[1])));
            data.extend(pairs.remainder().iter().copied());
        }
        let needs = self.needs_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![channels, half], data),
            Op::AvgPool2 { x },
            needs,
        ))
    }

    /// Doubles the length by linear interpolation: even outputs copy the
    /// input, odd outputs average neighbours, and the last output repeats the
    /// final sample.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(TensorError::InvalidShape(xv.shape().to_vec()));
        }
        let (channels, width) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(channels * width * 2);
        for c in 0..channels {
            let row = xv.row(c);
            for t in 0..width {
                data.push(row[t]);
                data.push(if t + 1 < width { 0.5 * (row[t] + row[t + 1]) } else { row[t] });
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![channels, width * 2], data),
            Op::Upsample2 { x },
            needs,
        ))
    }

    /// Normalizes each position of a `[C, T]` value across its channels,
    /// then applies the per-channel affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        if xv.rank() != 2 || gv.shape() != [xv.shape()[0]] || bv.shape() != gv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let (out, normalized, inv_std) = kernels::layer_norm_forward(xv, gv, bv, eps);
        let needs = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// Multiplies by a precomputed keep-mask whose kept entries already carry
    /// the inverted-dropout scale.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                left: xv.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let needs = self.needs_grad(x);
        Ok(self.push(out, Op::Dropout { x, mask }, needs))
    }

    /// Mean binary cross-entropy of probabilities `p` against constant targets.
    ///
    /// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var, TensorError> {
        let pv = self.value(p);
        if pv.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                left: pv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let value = mean_bce(pv.data(), targets);
        let needs = self.needs_grad(p);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Discards all recorded nodes, keeping the allocation for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Back-propagates from a scalar `loss`, returning gradients for every
    /// node that depends on a parameter. The tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let sign_b = if *kind == BinaryKind::Sub { -1.0 } else { 1.0 };
                for (var, other, sign) in [(*a, bv, 1.0), (*b, av, sign_b)] {
                    if !self.needs_grad(var) {
                        continue;
                    }
                    let own = self.value(var);
                    let slot = slot(grads, var, own.shape());
                    let scalar_own = own.is_scalar() && g.len() > 1;
                    match (kind, scalar_own) {
                        (BinaryKind::Mul, false) => {
                            if other.len() == gd.len() {
                                for ((s, &gi), &o) in slot.iter_mut().zip(gd).zip(other.data()) {
                                    *s += gi * o;
                                }
                            } else {
                                let o = other.data()[0];
                                for (s, &gi) in slot.iter_mut().zip(gd) {
                                    *s += gi * o;
                                }
                            }
                        }
                        (BinaryKind::Mul, true) => {
                            let acc: f64 = if other.len() == gd.len() {
                                gd.iter().zip(other.data()).map(|(a, b)| a * b).sum()
                            } else {
                                gd.iter().sum::<f64>() * other.data()[0]
                            };
                            slot[0] += acc;
                        }
                        (_, false) => {
                            for (s, &gi) in slot.iter_mut().zip(gd) {
                                *s += sign * gi;
                            }
                        }
                        (_, true) => {
                            slot[0] += sign * gd.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Activation { kind, x } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let y = node.value.data();
                let shape = self.value(*x).shape();
                let slot = slot(grads, *x, shape);
                match kind {
                    Activation::Tanh => {
                        for ((s, &gi), &yi) in slot.iter_mut().zip(gd).zip(y) {
                            *s += gi * (1.0 - yi * yi);
                        }
                    }
                    Activation::Sigmoid => {
                        for ((s, &gi), &yi) in slot.iter_mut().zip(gd).zip(y) {
                            *s += gi * yi * (1.0 - yi);
                        }
                    }
                    Activation::Relu => {
                        for ((s, &gi), &yi) in slot.iter_mut().zip(gd).zip(y) {
                            if yi > 0.0 {
                                *s += gi;
                            }
                        }
                    }
                }
            }
            Op::Reduce { kind, x, axis } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let xv = self.value(*x);
                let slot = slot(grads, *x, xv.shape());
                match axis {
                    None => {
                        let scale = match kind {
                            ReduceKind::Sum => gd[0],
                            ReduceKind::Mean => gd[0] / xv.len() as f64,
                        };
                        slot.iter_mut().for_each(|s| *s += scale);
                    }
                    Some(ax) => {
                        let (outer, extent, inner) = split_axis(xv.shape(), *ax);
                        let scale = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / extent as f64,
                        };
                        for o in 0..outer {
                            let src = &gd[o * inner..(o + 1) * inner];
                            for e in 0..extent {
                                let start = (o * extent + e) * inner;
                                for (s, &gi) in slot[start..start + inner].iter_mut().zip(src) {
                                    *s += scale * gi;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let extent = pv.shape()[*axis];
                    if self.needs_grad(p) {
                        let block = extent * inner;
                        let slot = slot(grads, p, pv.shape());
                        for o in 0..outer {
                            let src_start = (o * total + offset) * inner;
                            for (s, &gi) in slot[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(&gd[src_start..src_start + block])
                            {
                                *s += gi;
                            }
                        }
                    }
                    offset += extent;
                }
            }
            Op::Window { x, offset } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let xv = self.value(*x);
                let (channels, width) = (xv.shape()[0], xv.shape()[1]);
                let len = node.value.shape()[1];
                let (lo, hi) = overlap(*offset, len, width);
                let slot = slot(grads, *x, xv.shape());
                for c in 0..channels {
                    for t in lo..hi {
                        slot[c * width + (t as isize + offset) as usize] += gd[c * len + t];
                    }
                }
            }
            Op::Conv1d {
                x,
                weight,
                bias,
                dilation,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*weight));
                if self.needs_grad(*bias) {
                    let width = xv.shape()[1];
                    let slot = slot(grads, *bias, self.value(*bias).shape());
                    for (o, s) in slot.iter_mut().enumerate() {
                        *s += gd[o * width..(o + 1) * width].iter().sum::<f64>();
                    }
                }
                if self.needs_grad(*weight) {
                    let slot = slot(grads, *weight, wv.shape());
                    kernels::conv1d_weight_grad(xv, wv.shape(), gd, *dilation, slot);
                }
                if self.needs_grad(*x) {
                    let slot = slot(grads, *x, xv.shape());
                    kernels::conv1d_input_grad(xv.shape(), wv, gd, *dilation, slot);
                }
            }
            Op::AvgPool2 { x } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let xv = self.value(*x);
                let (channels, width) = (xv.shape()[0], xv.shape()[1]);
                let half = node.value.shape()[1];
                let slot = slot(grads, *x, xv.shape());
                for c in 0..channels {
                    let src = &gd[c * half..(c + 1) * half];
                    let dst = &mut slot[c * width..(c + 1) * width];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let share = if t == width - 1 && width % 2 == 1 { 1.0 } else { 0.5 };
                        *d += share * src[t / 2];
                    }
                }
            }
            Op::Upsample2 { x } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let xv = self.value(*x);
                let (channels, width) = (xv.shape()[0], xv.shape()[1]);
                let slot = slot(grads, *x, xv.shape());
                for c in 0..channels {
                    let src = &gd[c * 2 * width..(c + 1) * 2 * width];
                    let dst = &mut slot[c * width..(c + 1) * width];
                    for t in 0..width {
                        dst[t] += src[2 * t];
                        if t + 1 < width {
                            dst[t] += 0.5 * src[2 * t + 1];
                            dst[t + 1] += 0.5 * src[2 * t + 1];
                        } else {
                            dst[t] += src[2 * t + 1];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let (channels, width) = (xv.shape()[0], xv.shape()[1]);
                if self.needs_grad(*gamma) {
                    let slot = slot(grads, *gamma, gv.shape());
                    for (c, s) in slot.iter_mut().enumerate() {
                        let row = c * width..(c + 1) * width;
                        *s += kernels::dot(&gd[row.clone()], &normalized[row]);
                    }
                }
                if self.needs_grad(*beta) {
                    let slot = slot(grads, *beta, gv.shape());
                    for (c, s) in slot.iter_mut().enumerate() {
                        *s += gd[c * width..(c + 1) * width].iter().sum::<f64>();
                    }
                }
                if self.needs_grad(*x) {
                    let slot = slot(grads, *x, xv.shape());
                    kernels::layer_norm_input_grad(channels, width, gv.data(), gd, normalized, inv_std, slot);
                }
            }
            Op::Dropout { x, mask } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let slot = slot(grads, *x, self.value(*x).shape());
                for ((s, &gi), &m) in slot.iter_mut().zip(gd).zip(mask) {
                    *s += gi * m;
                }
            }
            Op::Bce { p, targets } => {
                if !self.needs_grad(*p) {
                    return;
                }
                let pv = self.value(*p);
                let scale = gd[0] / targets.len() as f64;
                let slot = slot(grads, *p, pv.shape());
                for ((s, &pi), &y) in slot.iter_mut().zip(pv.data()).zip(targets) {
                    if pi > BCE_CLAMP && pi < 1.0 - BCE_CLAMP {
                        *s += scale * ((1.0 - y) / (1.0 - pi) - y / pi);
                    }
                }
            }
        }
    }
}

/// Mutable gradient buffer for `v`, zero-initialized on first use.
fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

/// `(outer, extent, inner)` sizes around `axis` for a row-major shape.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output positions `[lo, hi)` of a window whose source index `t + offset`
/// lands inside `[0, width)`.
fn overlap(offset: isize, len: usize, width: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (width as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
///
/// Each term is written `-(ln(1-p) + y·(ln p - ln(1-p)))`, which is exactly
/// `ln 2` at `p = 0.5` whatever `y` is, and the mean is taken relative to the
/// first term so equal terms average to themselves without rounding.
pub fn mean_bce(probs: &[f64], targets: &[f64]) -> f64 {
    debug_assert_eq!(probs.len(), targets.len());
    let term = |(&p, &y): (&f64, &f64)| {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let (lp, lq) = (p.ln(), (1.0 - p).ln());
        -(lq + y * (lp - lq))
    };
    let mut terms = probs.iter().zip(targets).map(term);
    let Some(first) = terms.next() else {
        return 0.0;
    };
    let shift: f64 = terms.map(|t| t - first).sum();
    first + shift / probs.len() as f64
}

/// Logistic function evaluated on the branch that cannot overflow.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqmark_core::autodiff::{finite_difference_gradient, max_relative_error, Tape, Tensor, Var, DEFAULT_EPS};
use seqmark_core::layers::Mode;
use seqmark_core::net::{AblationMode, MarkerNet, NetConfig};
use seqmark_core::supervision::marker_target;

pub mod criteria;

pub const INSTANCES: usize = 100;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `[-hi, -gap] ∪ [gap, hi]`, keeping clear of kinks at zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..hi);
            if rng.gen() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// `sum(y ⊙ w)` for a fixed random `w`, so every output element gets a
/// distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let w = random_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let wv = tape.constant(w);
    let prod = tape.mul(y, wv).unwrap();
    tape.sum(prod)
}

/// Largest relative error between tape gradients and central differences for
/// every input of `build`, which maps bound inputs to a scalar loss.
pub fn gradient_error<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |probe| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.param(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let loss = build(&mut tape, &vars);
                tape.value(loss).item().unwrap()
            },
            x,
            DEFAULT_EPS,
        );
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Worst gradient error for one primitive over [`INSTANCES`] random cases.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for k in 0..INSTANCES as u64 {
        let c_in = r.gen_range(1..4);
        let c_out = r.gen_range(1..4);
        let kernel = [1, 3, 5][r.gen_range(0..3)];
        let dilation = r.gen_range(1..4);
        let t = r.gen_range(3..13);
        let inputs = [
            random_tensor(&mut r, &[c_in, t], -1.0, 1.0),
            random_tensor(&mut r, &[c_out, c_in, kernel], -1.0, 1.0),
            random_tensor(&mut r, &[c_out], -1.0, 1.0),
        ];
        let e = gradient_error(&inputs, |tape, v| {
            let y = tape.conv1d(v[0], v[1], v[2], dilation).unwrap();
            weighted_sum(tape, y, k)
        });
        worst = worst.max(e);
    }
    out.push(("conv1d", worst));

    let unary: [(&'static str, fn(&mut Tape, Var) -> Var); 2] = [
        ("avg_pool", |tape, x| tape.avg_pool2(x).unwrap()),
        ("upsample_linear", |tape, x| tape.upsample2(x).unwrap()),
    ];
    for (name, op) in unary {
        let mut worst = 0.0f64;
        for k in 0..INSTANCES as u64 {
            let shape = [r.gen_range(1..4), r.gen_range(1..12)];
            let x = random_tensor(&mut r, &shape, -2.0, 2.0);
            let e = gradient_error(&[x], |tape, v| {
                let y = op(tape, v[0]);
                weighted_sum(tape, y, k)
            });
            worst = worst.max(e);
        }
        out.push((name, worst));
    }

    let mut worst = 0.0f64;
    for k in 0..INSTANCES as u64 {
        let (c, t) = (r.gen_range(2..6), r.gen_range(1..8));
        let inputs = [
            random_tensor(&mut r, &[c, t], -2.0, 2.0),
            random_tensor(&mut r, &[c], 0.5, 1.5),
            random_tensor(&mut r, &[c], -0.5, 0.5),
        ];
        let e = gradient_error(&inputs, |tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(tape, y, k)
        });
        worst = worst.max(e);
    }
    out.push(("layer_norm", worst));

    let acts: [(&'static str, fn(&mut Tape, Var) -> Var); 3] = [
        ("tanh", |tape, x| tape.tanh(x)),
        ("sigmoid", |tape, x| tape.sigmoid(x)),
        ("relu", |tape, x| tape.relu(x)),
    ];
    for (name, op) in acts {
        let mut worst = 0.0f64;
        for k in 0..INSTANCES as u64 {
            let shape = [r.gen_range(1..4), r.gen_range(1..10)];
            let x = away_from_zero(&mut r, &shape, 1e-3, 4.0);
            let e = gradient_error(&[x], |tape, v| {
                let y = op(tape, v[0]);
                weighted_sum(tape, y, k)
            });
            worst = worst.max(e);
        }
        out.push((name, worst));
    }

    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let t = r.gen_range(1..20);
        let p = random_tensor(&mut r, &[1, t], 0.02, 0.98);
        let y: Vec<f64> = (0..t).map(|_| r.gen_range(0.0..1.0)).collect();
        let e = gradient_error(&[p], |tape, v| tape.bce(v[0], &y).unwrap());
        worst = worst.max(e);
    }
    out.push(("bce_loss", worst));
    out
}

/// The small network used for whole-model gradient checks.
pub fn tiny_net_config() -> NetConfig {
    NetConfig {
        input_channels: 1,
        encoder_depth: 1,
        stage_channels: vec![3],
        global_kernels: vec![3, 5],
        local_layers: 2,
        local_channels: 3,
        local_kernel: 3,
        local_dilations: vec![1, 2],
        fusion_channels: 2,
        dropout: 0.1,
    }
}

/// Worst relative error of the full network's parameter gradients (BCE
/// against a smoothed label, training-mode dropout with fixed masks).
pub fn net_gradient_error(instances: usize) -> f64 {
    const T: usize = 16;
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for k in 0..instances as u64 {
        let mode = AblationMode::ALL[k as usize % 3];
        let net = MarkerNet::new("M", vec!["GR".into()], tiny_net_config(), mode, k).unwrap();
        let x = random_tensor(&mut r, &[1, T], -2.0, 2.0);
        let y = marker_target(T, r.gen_range(0..T), Some(3.0)).unwrap();
        let params: Vec<Tensor> = net.params().tensors().to_vec();
        let e = gradient_error(&params, |tape, vars| {
            let xv = tape.constant(x.clone());
            let out = net.forward_bound(tape, vars, xv, Mode::Train, &mut rng(1000 + k)).unwrap();
            tape.bce(out.prob, &y).unwrap()
        });
        worst = worst.max(e);
    }
    worst
}

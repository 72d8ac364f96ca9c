//! Input-perturbation probes: which outputs move when one input sample does.

mod common;

use common::{random_tensor, rng};
use seqmark_core::autodiff::{Tape, Tensor};
use seqmark_core::layers::Mode;
use seqmark_core::net::{AblationMode, MarkerNet, NetConfig};

const T: usize = 400;
const T0: usize = 200;

fn net(seed: u64) -> MarkerNet {
    let config = NetConfig {
        encoder_depth: 3,
        stage_channels: vec![4, 6, 6],
        global_kernels: vec![3, 7, 11],
        local_layers: 3,
        local_channels: 4,
        local_kernel: 3,
        local_dilations: vec![1, 2, 4],
        fusion_channels: 3,
        ..NetConfig::default()
    };
    MarkerNet::new("M", vec!["GR".into()], config, AblationMode::Combined, seed).unwrap()
}

/// Positions whose features differ after nudging input sample `T0`.
fn changed_positions(net: &MarkerNet, x: &Tensor, global: bool) -> Vec<usize> {
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let params = net.params().bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = if global {
            net.global_forward(&mut tape, &params, xv, Mode::Eval, &mut rng(0))
        } else {
            net.local_forward(&mut tape, &params, xv, Mode::Eval, &mut rng(0))
        }
        .unwrap();
        tape.value(out).clone()
    };
    let before = run(x);
    let mut nudged = x.clone();
    nudged.data_mut()[T0] += 1.0;
    let after = run(&nudged);
    let f = before.shape()[0];
    (0..T)
        .filter(|&t| (0..f).any(|c| before.row(c)[t].to_bits() != after.row(c)[t].to_bits()))
        .collect()
}

#[test]
fn local_view_is_confined_to_its_receptive_field() {
    // three layers whose widest tap reaches 4 samples each way
    let reach = 3 * 4;
    for seed in 0..5 {
        let x = random_tensor(&mut rng(seed), &[1, T], -2.0, 2.0);
        let moved = changed_positions(&net(seed), &x, false);
        let lo = *moved.first().unwrap();
        let hi = *moved.last().unwrap();
        assert!(T0 - lo <= reach && hi - T0 <= reach, "seed {seed}: moved {lo}..={hi}");
        assert!(moved.contains(&T0));
        assert!(T0 - lo == reach || hi - T0 == reach, "seed {seed}: field narrower than {reach}");
    }
}

#[test]
fn global_view_sees_far_beyond_the_local_one() {
    // 2^depth pooled positions times the widest kernel
    let span = (1 << 3) * 11;
    for seed in 0..5 {
        let x = random_tensor(&mut rng(seed), &[1, T], -2.0, 2.0);
        let moved = changed_positions(&net(seed), &x, true);
        let width = moved.last().unwrap() - moved.first().unwrap() + 1;
        assert!(width >= span, "seed {seed}: only {width} outputs moved");
    }
}

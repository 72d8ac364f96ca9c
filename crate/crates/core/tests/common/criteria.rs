//! Property checks shared by the topic tests and the acceptance runner. Each
//! returns a short summary on success and a description of the first
//! violation otherwise.

use rand::Rng;
use seqmark_core::autodiff::{Tape, Tensor};
use seqmark_core::data::{synthesize_wells, write_checkpoint, Dataset, MarkerPick, SynthConfig};
use seqmark_core::evaluation::{evaluate_dataset, f1_score, precision_at, DEFAULT_TOLERANCES_FT};
use seqmark_core::inference::{mc_dropout_detect, validate_detection, Detection};
use seqmark_core::layers::Mode;
use seqmark_core::net::{attention_fuse, AblationMode, MarkerNet, NetConfig};
use seqmark_core::supervision::{bce_loss, gaussian_smooth_label, one_hot_label};
use seqmark_core::training::{train_marker_model, TrainConfig};

use super::{random_tensor, rng};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn small_net(mode: AblationMode, dropout: f64, seed: u64) -> MarkerNet {
    let config = NetConfig {
        encoder_depth: 3,
        stage_channels: vec![4, 6, 6],
        local_layers: 2,
        local_channels: 4,
        fusion_channels: 4,
        dropout,
        ..NetConfig::default()
    };
    MarkerNet::new("UB000", vec!["GR".into()], config, mode, seed).unwrap()
}

/// The fused features are exactly the product of the two views, and the
/// gate behaves as a gate.
pub fn attention_gating() -> Outcome {
    let mut r = rng(20);
    for k in 0..20u64 {
        let net = small_net(AblationMode::Combined, 0.1, k);
        let t = r.gen_range(40..120);
        let x = random_tensor(&mut r, &[1, t], -2.0, 2.0);
        let mut tape = Tape::new();
        let (_, out) = net.forward(&mut tape, &x, Mode::Eval, &mut rng(0)).unwrap();
        let (g, l, a) = (
            tape.value(out.global.unwrap()),
            tape.value(out.local.unwrap()),
            tape.value(out.fused.unwrap()),
        );
        for ((gv, lv), av) in g.data().iter().zip(l.data()).zip(a.data()) {
            ensure!((gv * lv).to_bits() == av.to_bits(), "A != G*L: {gv} * {lv} vs {av}");
        }
    }

    for _ in 0..100 {
        let shape = [r.gen_range(1..5), r.gen_range(1..30)];
        let l = random_tensor(&mut r, &shape, -5.0, 5.0);
        let g = random_tensor(&mut r, &shape, -1.0, 1.0);
        let mut tape = Tape::new();
        let lv = tape.constant(l.clone());
        let zeros = tape.constant(Tensor::zeros(&shape));
        let ones = tape.constant(Tensor::full(&shape, 1.0));
        let gv = tape.constant(g.clone());
        let a0 = attention_fuse(&mut tape, zeros, lv).unwrap();
        let a1 = attention_fuse(&mut tape, ones, lv).unwrap();
        let ag = attention_fuse(&mut tape, gv, lv).unwrap();
        ensure!(tape.value(a0).data().iter().all(|&v| v == 0.0), "G=0 left a nonzero output");
        ensure!(tape.value(a1).data() == l.data(), "G=1 changed L");
        for ((gi, li), ai) in g.data().iter().zip(l.data()).zip(tape.value(ag).data()) {
            let expected = gi.signum() * li.signum();
            ensure!(ai.signum() == expected, "sign law broken: {gi} * {li} = {ai}");
        }
    }
    Ok("A == G*L bit-exactly on 20 networks; gate and sign laws on 100 tensors".into())
}

/// One parameter set handles every length and stays inside (0, 1).
pub fn variable_length() -> Outcome {
    let net = small_net(AblationMode::Combined, 0.1, 3);
    let mut r = rng(30);
    let mut seen = Vec::new();
    for t in [64usize, 317, 1000, 2500] {
        let x = random_tensor(&mut r, &[1, t], -3.0, 3.0);
        let p = net.predict_eval(&x).map_err(|e| e.to_string())?;
        ensure!(p.len() == t, "length {t} gave {} outputs", p.len());
        ensure!(p.iter().all(|&v| v > 0.0 && v < 1.0), "length {t}: value outside (0, 1)");
        seen.push(t);
    }
    Ok(format!("lengths {seen:?} all mapped to (0, 1)"))
}

fn det(well: &str, marker: &str, truth: f64, error: f64, prob: f64, unc: f64) -> Detection {
    validate_detection(
        Detection {
            well_id: well.into(),
            marker: marker.into(),
            depth_index: None,
            depth_ft: truth + error,
            probability: prob,
            uncertainty_ft: unc,
            valid: false,
        },
        0.5,
        5.0,
    )
}

/// Five wells, two markers, hand-chosen errors; see [`metric_fixture`].
pub fn metric_fixture() -> (Vec<Detection>, Vec<MarkerPick>) {
    let mut picks = Vec::new();
    let mut dets = Vec::new();
    // (marker, signed error, probability, uncertainty) per well
    let rows: [(&str, [(f64, f64, f64); 5]); 2] = [
        ("UB000", [(0.0, 0.9, 1.0), (0.5, 0.8, 0.5), (-1.5, 0.7, 2.0), (3.0, 0.95, 4.5), (8.0, 0.4, 1.0)]),
        ("TF180", [(-1.0, 0.6, 1.0), (2.0, 0.51, 0.0), (6.0, 0.9, 1.5), (-12.0, 0.8, 3.0), (0.0, 0.9, 5.0)]),
    ];
    for (marker, wells) in rows {
        for (w, &(err, prob, unc)) in wells.iter().enumerate() {
            let well = format!("W{}", w + 1);
            let truth = 9000.0 + 100.0 * w as f64 + if marker == "TF180" { 40.0 } else { 0.0 };
            picks.push(MarkerPick {
                well_id: well.clone(),
                marker: marker.into(),
                depth_ft: truth,
            });
            dets.push(det(&well, marker, truth, err, prob, unc));
        }
    }
    (dets, picks)
}

/// Report values against a plain recount and against hand-worked numbers.
pub fn metric_oracle() -> Outcome {
    let (dets, picks) = metric_fixture();
    let report = evaluate_dataset(&dets, &picks, &DEFAULT_TOLERANCES_FT).map_err(|e| e.to_string())?;

    // brute-force recount straight from the detection list
    let mut names: Vec<&str> = dets.iter().map(|d| d.marker.as_str()).collect();
    names.sort();
    names.dedup();
    let mut sum_p2 = 0.0;
    let mut sum_recall = 0.0;
    for (mr, name) in report.markers.iter().zip(&names) {
        ensure!(mr.marker == *name, "marker order {} vs {name}", mr.marker);
        let mut m = 0usize;
        let mut n = 0usize;
        for d in dets.iter().filter(|d| d.marker == *name) {
            n += 1;
            if d.probability > 0.5 && d.uncertainty_ft < 5.0 {
                m += 1;
            }
        }
        ensure!(mr.m == m && mr.n == n, "{name}: M/N {}/{} vs {m}/{n}", mr.m, mr.n);
        for (k, &tol) in DEFAULT_TOLERANCES_FT.iter().enumerate() {
            let mut hits = 0usize;
            for d in dets.iter().filter(|d| d.marker == *name && d.valid) {
                let truth = picks
                    .iter()
                    .find(|p| p.well_id == d.well_id && p.marker == d.marker)
                    .unwrap()
                    .depth_ft;
                if (d.depth_ft - truth).abs() <= tol {
                    hits += 1;
                }
            }
            let expected = hits as f64 / m as f64;
            ensure!(mr.precision[k] == Some(expected), "{name} @{tol}: {:?} vs {expected}", mr.precision[k]);
        }
        let recall = m as f64 / n as f64;
        ensure!(mr.recall == recall, "{name}: recall {} vs {recall}", mr.recall);
        sum_p2 += mr.precision[1].unwrap();
        sum_recall += recall;
    }
    let mean_p2 = sum_p2 / names.len() as f64;
    let mean_recall = sum_recall / names.len() as f64;
    let f1 = 2.0 * mean_p2 * mean_recall / (mean_p2 + mean_recall);
    ensure!(report.f1 == f1, "F1 {} vs recount {f1}", report.f1);

    // hand-worked values for this fixture
    let ub = &report.markers[1];
    let tf = &report.markers[0];
    ensure!(ub.precision == vec![Some(0.5), Some(0.75), Some(1.0), Some(1.0)], "UB000 {:?}", ub.precision);
    ensure!(tf.precision == vec![Some(0.25), Some(0.5), Some(0.5), Some(0.75)], "TF180 {:?}", tf.precision);
    ensure!(ub.recall == 0.8 && tf.recall == 0.8, "recalls {} {}", ub.recall, tf.recall);
    ensure!((report.f1 - 1.0 / 1.425).abs() < 1e-15, "F1 {}", report.f1);

    let spot = precision_at(&[0.5, 1.0, 3.0], 2.0).map_err(|e| e.to_string())?;
    ensure!(spot == 2.0 / 3.0, "precision spot check {spot}");
    ensure!(f1_score(0.5, 1.0) == 2.0 / 3.0, "f1 spot check");
    Ok(format!("recount matches; F1@2ft {:.6}", report.f1))
}

/// Degenerate MC cases, the strict filter, and seeded reproducibility.
pub fn mc_protocol() -> Outcome {
    let mut r = rng(50);
    let x = random_tensor(&mut r, &[1, 200], -2.0, 2.0);
    let (_, u) = mc_dropout_detect(&small_net(AblationMode::Combined, 0.0, 1), &x, 0.0, 0.5, 30, 9).unwrap();
    ensure!(u == 0.0, "dropout 0 gave uncertainty {u}");
    let noisy = small_net(AblationMode::Combined, 0.5, 1);
    let (_, u) = mc_dropout_detect(&noisy, &x, 0.0, 0.5, 1, 9).unwrap();
    ensure!(u == 0.0, "one pass gave uncertainty {u}");

    let d = |prob: f64, unc: f64| {
        validate_detection(
            Detection {
                well_id: "W".into(),
                marker: "M".into(),
                depth_index: Some(0),
                depth_ft: 0.0,
                probability: prob,
                uncertainty_ft: unc,
                valid: false,
            },
            0.5,
            5.0,
        )
        .valid
    };
    ensure!(d(0.9, 1.0), "0.9 / 1 ft should be valid");
    ensure!(!d(0.9, 5.0), "uncertainty at the threshold must be invalid");
    ensure!(!d(0.5, 1.0), "probability at the threshold must be invalid");
    ensure!(!d(0.3, 0.0), "low probability must be invalid");

    let mut spread = Vec::new();
    for seed in [3u64, 4, 5] {
        let a = mc_dropout_detect(&noisy, &x, 0.0, 0.5, 30, seed).unwrap();
        let b = mc_dropout_detect(&noisy, &x, 0.0, 0.5, 30, seed).unwrap();
        ensure!(a.1.to_bits() == b.1.to_bits(), "seed {seed}: {} vs {}", a.1, b.1);
        spread.push(a.1);
    }
    Ok(format!("degenerate cases exact; strict filter; reproducible spreads {spread:?} ft"))
}

/// A quick training setup: short wells, a small network, a few epochs.
pub fn quick_setup() -> (Dataset, NetConfig, TrainConfig) {
    let synth = SynthConfig {
        n_wells: 12,
        min_len: 480,
        max_len: 560,
        n_layers: 4,
        markers: seqmark_core::data::MarkerSpec::parse_list("UB000:strong,MB000:strong").unwrap(),
        seed: 5,
        ..SynthConfig::default()
    };
    let (wells, picks) = synthesize_wells(&synth).unwrap();
    let net = NetConfig {
        encoder_depth: 2,
        stage_channels: vec![4, 6],
        local_layers: 2,
        local_channels: 4,
        fusion_channels: 4,
        ..NetConfig::default()
    };
    let train = TrainConfig {
        learning_rate: 0.01,
        max_epochs: 3,
        patience: 5,
        seed: 11,
        ..TrainConfig::default()
    };
    (Dataset { wells, picks }, net, train)
}

/// Same seed, same bytes; a reload predicts bit-identically.
pub fn determinism() -> Outcome {
    let (ds, net, train) = quick_setup();
    let a = train_marker_model(&ds, "UB000", &net, &train).map_err(|e| e.to_string())?;
    let b = train_marker_model(&ds, "UB000", &net, &train).map_err(|e| e.to_string())?;
    let text = write_checkpoint(&a.checkpoint);
    ensure!(text == write_checkpoint(&b.checkpoint), "same seed gave different checkpoints");

    let other = TrainConfig { seed: 12, ..train };
    let c = train_marker_model(&ds, "UB000", &net, &other).map_err(|e| e.to_string())?;
    ensure!(text != write_checkpoint(&c.checkpoint), "a different seed gave the same checkpoint");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ub000.smck");
    seqmark_core::data::save_checkpoint(&a.checkpoint, &path).map_err(|e| e.to_string())?;
    let back = seqmark_core::data::load_checkpoint(&path).map_err(|e| e.to_string())?;
    for well in &ds.wells {
        let x = a.checkpoint.norm.apply(well);
        let before = a.checkpoint.net.predict_eval(&x.samples).unwrap();
        let after = back.net.predict_eval(&back.norm.apply(well).samples).unwrap();
        ensure!(
            before.iter().zip(&after).all(|(p, q)| p.to_bits() == q.to_bits()),
            "{}: predictions changed after reload",
            well.well_id
        );
    }
    Ok(format!("{} bytes identical across runs; {} wells predict identically after reload", text.len(), ds.wells.len()))
}

/// BCE at p = 0.5 and the shape of the smoothed label.
pub fn supervision_analytics() -> Outcome {
    let mut r = rng(100);
    for _ in 0..200 {
        let n = r.gen_range(1..300);
        let y: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let loss = bce_loss(&vec![0.5; n], &y).map_err(|e| e.to_string())?;
        ensure!(loss == std::f64::consts::LN_2, "bce at 0.5 = {loss:e} for n = {n}");
        let mut tape = Tape::new();
        let p = tape.param(Tensor::full(&[1, n], 0.5));
        let l = tape.bce(p, &y).unwrap();
        let v = tape.value(l).item().unwrap();
        ensure!(v == std::f64::consts::LN_2, "tape bce at 0.5 = {v:e} for n = {n}");
    }
    for sigma in [1usize, 2, 3, 5, 8] {
        for m in [0usize, 17, 60, 99] {
            let label = gaussian_smooth_label(&one_hot_label(100, m).unwrap(), sigma as f64).unwrap();
            let v = &label.values;
            ensure!(v[m] == 1.0, "peak {} at sigma {sigma}", v[m]);
            let half = (-0.5f64).exp();
            if m >= sigma {
                ensure!((v[m - sigma] - half).abs() < 1e-12, "left shoulder {}", v[m - sigma]);
            }
            if m + sigma < 100 {
                ensure!((v[m + sigma] - half).abs() < 1e-12, "right shoulder {}", v[m + sigma]);
            }
        }
    }
    Ok("bce(0.5) == ln 2 on 200 soft targets; peak 1 and exp(-1/2) at ±sigma".into())
}

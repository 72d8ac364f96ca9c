//! End-to-end training behaviour on small synthetic sets.

mod common;

use common::criteria::quick_setup;
use seqmark_core::data::{normalize_wells, pick_to_index, synthesize_wells, MarkerSpec, SynthConfig};
use seqmark_core::net::{AblationMode, MarkerNet};
use seqmark_core::supervision::{bce_loss, marker_target};
use seqmark_core::training::{train_marker_model, Example, TrainConfig, Trainer};

#[test]
fn a_single_well_can_be_memorized() {
    let synth = SynthConfig {
        n_wells: 1,
        min_len: 360,
        max_len: 360,
        n_layers: 3,
        markers: MarkerSpec::parse_list("UB000:strong").unwrap(),
        ..SynthConfig::default()
    };
    let (wells, picks) = synthesize_wells(&synth).unwrap();
    let (wells, _) = normalize_wells(&wells, &wells);
    let well = &wells[0];
    let index = pick_to_index(picks[0].depth_ft, well).unwrap();
    // one-hot targets: a smoothed target's own entropy sits above 0.01
    let example = Example {
        well_id: well.well_id.clone(),
        input: well.samples.clone(),
        target: marker_target(well.len(), index, None).unwrap(),
    };
    let (_, net_config, _) = quick_setup();
    let net = MarkerNet::new("UB000", vec!["GR".into()], net_config, AblationMode::Combined, 1).unwrap();
    let config = TrainConfig {
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(net, config);
    for _ in 0..500 {
        trainer.step(&example).unwrap();
    }
    let p = trainer.net.predict_eval(&example.input).unwrap();
    let loss = bce_loss(&p, &example.target).unwrap();
    assert!(loss < 0.01, "training BCE {loss}");
}

#[test]
fn validation_loss_improves_on_sixty_wells() {
    let (_, net_config, train) = quick_setup();
    let synth = SynthConfig {
        n_wells: 60,
        min_len: 480,
        max_len: 560,
        n_layers: 4,
        markers: MarkerSpec::parse_list("UB000:strong,MB000:strong").unwrap(),
        ..SynthConfig::default()
    };
    let (wells, picks) = synthesize_wells(&synth).unwrap();
    let ds = seqmark_core::data::Dataset { wells, picks };
    let model = train_marker_model(&ds, "MB000", &net_config, &train).unwrap();
    let h = &model.history;
    assert!(h.best_val_loss() < h.initial_val_loss, "{} vs {}", h.best_val_loss(), h.initial_val_loss);
    assert_eq!(model.split.train.len() + model.split.val.len() + model.split.test.len(), 60);
    assert!(model.skipped.is_empty());
}

#[test]
fn wells_without_the_pick_are_skipped_and_counted() {
    let (mut ds, net_config, train) = quick_setup();
    let dropped = ds.wells[0].well_id.clone();
    ds.picks.retain(|p| !(p.well_id == dropped && p.marker == "UB000"));
    let split = seqmark_core::training::split_dataset(ds.wells.len(), train.test_fraction, train.val_fraction, train.seed).unwrap();
    let model = train_marker_model(&ds, "UB000", &net_config, &train).unwrap();
    if split.test.contains(&0) {
        assert!(model.skipped.is_empty());
    } else {
        assert_eq!(model.skipped, vec![dropped]);
    }
}

#[test]
fn best_epoch_weights_are_returned() {
    let (ds, net_config, mut train) = quick_setup();
    train.max_epochs = 6;
    train.learning_rate = 0.05;
    let model = train_marker_model(&ds, "UB000", &net_config, &train).unwrap();
    let h = &model.history;
    let best = h.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(h.best_val_loss(), best);
    assert_eq!(h.epochs[h.best_epoch - 1].val_loss, best);
}

mod common;

use common::separable_split;
use cvarsam::evaluation::{
    aggregate_scans, cvar_loss, evaluate, loss_surface, macro_f1, predict_slices, surface_csv,
    ConfusionCounts,
};
use cvarsam::featurebank::{FeatureBank, SampleRecord, ScanManifest};
use cvarsam::optimizer::{train, TrainConfig};
use proptest::prelude::*;

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0usize..50, 0usize..50, 0usize..50, 0usize..50)
        .prop_filter("nonempty", |(a, b, c, d)| a + b + c + d > 0)
        .prop_map(|(tp, fp, tn, fn_)| ConfusionCounts { tp, fp, tn, fn_ })
}

proptest! {
    #[test]
    fn macro_f1_is_symmetric_and_bounded(c in counts()) {
        let f = macro_f1(&c).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f, macro_f1(&c.swapped()).unwrap());
        prop_assert_eq!(f == 1.0, c.fp == 0 && c.fn_ == 0 && c.tp > 0 && c.tn > 0);
    }

    #[test]
    fn votes_ignore_slice_order(mut preds in prop::collection::vec((0u64..6, 0u8..=1), 1..60), seed in any::<u64>()) {
        let before = aggregate_scans(&preds);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(preds.as_mut_slice(), &mut rng);
        prop_assert_eq!(before, aggregate_scans(&preds));
    }
}

#[test]
fn perfect_score_needs_both_classes_present() {
    // With only positives, the negative class has an empty denominator and
    // scores 0, so perfect predictions give 0.5.
    let only_pos = ConfusionCounts {
        tp: 4,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    assert_eq!(macro_f1(&only_pos).unwrap(), 0.5);
}

#[test]
fn scan_error_shows_through_the_vote() {
    // One scan, three slices labeled 1, two predicted wrong: the vote is 0.
    let records = (0..3)
        .map(|i| SampleRecord {
            scan_id: 9,
            label: Some(1),
            feature: vec![if i == 0 { 1.0 } else { -1.0 }],
        })
        .collect();
    let bank = FeatureBank::from_records(1, records).unwrap();
    let mut manifest = ScanManifest::default();
    manifest.insert(9, "scan_00009", Some(1));
    // A model that predicts the sign of its input.
    let mut model = train(
        &FeatureBank::from_records(
            1,
            vec![
                SampleRecord {
                    scan_id: 0,
                    label: Some(1),
                    feature: vec![1.0],
                },
                SampleRecord {
                    scan_id: 0,
                    label: Some(0),
                    feature: vec![-1.0],
                },
            ],
        )
        .unwrap(),
        &TrainConfig {
            hidden_dim: 2,
            batch_size: 2,
            epochs: 1,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    for h in &mut model.params.hidden {
        h.linear.weight.fill(0.0);
        h.linear.bias.fill(0.0);
        h.norm.shift.fill(0.0);
    }
    model.params.output.weight.fill(0.0);
    model.params.output.bias[0] = 0.0;
    model.params.hidden[0].linear.weight[[0, 0]] = 1.0;
    model.params.hidden[0].norm.running_mean.fill(0.0);
    model.params.hidden[0].norm.running_var.fill(1.0 - 1e-5);
    model.params.hidden[0].norm.scale.fill(1.0);
    model.params.hidden[1].linear.weight[[0, 0]] = 1.0;
    model.params.hidden[1].norm.running_mean.fill(0.0);
    model.params.hidden[1].norm.running_var.fill(1.0 - 1e-5);
    model.params.hidden[1].norm.scale.fill(1.0);
    model.params.output.weight[[0, 0]] = 10.0;
    model.params.output.bias[0] = -5.0;

    let labels: Vec<u8> = predict_slices(&model, &bank)
        .unwrap()
        .iter()
        .map(|p| p.label)
        .collect();
    assert_eq!(labels, vec![1, 0, 0]);
    let report = evaluate(&model, &bank, &manifest).unwrap();
    assert_eq!(
        report.slice.confusion,
        ConfusionCounts {
            tp: 1,
            fp: 0,
            tn: 0,
            fn_: 2
        }
    );
    assert_eq!(
        report.scan.confusion,
        ConfusionCounts {
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 1
        }
    );
    assert_eq!(report.scan_macro_f1(), 0.0);
}

#[test]
fn trained_model_beats_chance_and_surface_is_centered() {
    let (train_bank, test_bank, manifest) = separable_split(6, 10, 6, 4.0, 3);
    let model = train(
        &train_bank,
        &TrainConfig {
            hidden_dim: 24,
            epochs: 8,
            seed: 2,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let report = evaluate(&model, &test_bank, &manifest).unwrap();
    assert!(report.scan_macro_f1() >= 0.5, "{}", report.scan_macro_f1());
    assert_eq!(report.num_slices, test_bank.len());
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert!(json.get("slice").is_some() && json.get("scan").is_some());

    let surface = loss_surface(&model, &test_bank, 0.5, 1.0, 5, 11).unwrap();
    assert_eq!(surface.len(), 25);
    let center = surface[12];
    assert_eq!((center.u, center.v), (0.0, 0.0));
    let direct = cvar_loss(&model.params, &test_bank, 0.5).unwrap();
    assert!(
        (center.loss - direct).abs() <= 1e-9,
        "{} vs {direct}",
        center.loss
    );
    assert_eq!(
        surface,
        loss_surface(&model, &test_bank, 0.5, 1.0, 5, 11).unwrap()
    );
    assert_ne!(
        surface,
        loss_surface(&model, &test_bank, 0.5, 1.0, 5, 12).unwrap()
    );
    assert_eq!(surface_csv(&surface).lines().count(), 26);
}

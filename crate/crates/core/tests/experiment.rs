use std::collections::HashSet;

use proptest::prelude::*;

use pitlab::curriculum::{PresetOptions, DOC_LR};
use pitlab::experiment::*;

#[test]
fn epoch_and_lr_grid_gives_sixteen_distinct_cells() {
    let o = PresetOptions::default();
    let cells = sweep_configs("cont_pretrain", &o, &[1, 3, 5, 10], &[5e-6, 1e-5, 3e-5, 5e-5], &[0]).unwrap();
    assert_eq!(cells.len(), 16);
    let names: HashSet<_> = cells.iter().map(|(n, _)| n.clone()).collect();
    let hashes: HashSet<_> = cells.iter().map(|(_, c)| c.hash()).collect();
    assert_eq!((names.len(), hashes.len()), (16, 16));
    let (_, c) = &cells[2 * 4 + 2];
    assert_eq!(c.curriculum.phases[0].epochs, 5);
    assert_eq!(c.curriculum.phases[0].lr, 3e-5);
    assert_eq!(c.curriculum.phases[0].lr, DOC_LR);
    assert!(sweep_configs("cont_pretrain", &o, &[], &[1e-5], &[0]).is_err());
}

#[test]
fn spread_is_the_sample_standard_deviation() {
    let s = Stat::of(&[0.2, 0.4, 0.6]);
    assert!((s.mean - 0.4).abs() < 1e-15);
    assert!((s.spread.unwrap() - 0.2).abs() < 1e-15);
    assert_eq!(Stat::of(&[0.3]).spread, None);
}

#[test]
fn run_config_round_trips_and_hash_tracks_content() {
    let a = RunConfig::from_preset("pit", &PresetOptions::default()).unwrap();
    let back = RunConfig::from_json(&a.to_json()).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.hash(), a.hash());
    let mut b = a.clone();
    b.curriculum.seed += 1;
    assert_ne!(a.hash(), b.hash());
    assert!(matches!(RunConfig::from_preset("nope", &PresetOptions::default()), Err(ExperimentError::Usage(_))));
}

#[test]
fn exit_codes_follow_error_kind() {
    assert_eq!(ExperimentError::Usage("x".into()).exit_code(), 1);
    assert_eq!(ExperimentError::Data("x".into()).exit_code(), 2);
    assert_eq!(ExperimentError::Numerical("x".into()).exit_code(), 3);
}

proptest! {
    #[test]
    fn epoch_metrics_survive_json_bit_for_bit(loss in any::<f64>().prop_filter("finite", |x| x.is_finite()), ppl in 1.0f64..1e6) {
        let m = EpochMetrics {
            phase: "test_doc".into(),
            epoch: 3,
            steps: 120,
            loss,
            test_ppl: Some(ppl),
            test_em: Some(ppl.recip()),
            retention_em: None,
        };
        let back: EpochMetrics = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        prop_assert_eq!(back.loss.to_bits(), loss.to_bits());
        prop_assert_eq!(back, m);
    }
}

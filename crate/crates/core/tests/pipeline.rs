mod common;

use common::*;
use vmask::rng::stream_rng;
use vmask::run::prepare_data;
use vmask::secure_train::{run_epoch, EpochPlan};
use vmask::share::ShareDomain;

fn compare(masked: &[usize], domain: ShareDomain, sigma: f64, parties: usize) -> (f64, f64) {
    let mut cfg = blobs_config();
    cfg.domain = domain;
    cfg.sigma = sigma;
    cfg.parties = parties;
    let data = prepare_data(&cfg).unwrap();
    let (mut fed, mut reference) = paired(&cfg, &data, masked);
    let mut rng = stream_rng(9, 0);
    let mut loss_gap: f64 = 0.0;
    for _ in 0..3 {
        let plan = EpochPlan::shuffled(data.train.len(), cfg.batch_size, cfg.lr, &mut rng).unwrap();
        let a = run_epoch(&plan, &mut fed).unwrap();
        let b = reference.run_epoch(&plan).unwrap();
        loss_gap = loss_gap.max((a.mean_loss - b.mean_loss).abs());
    }
    (
        loss_gap,
        models_diff(&federation_models(&fed), &reference_models(&reference)),
    )
}

#[test]
fn unmasked_pipeline_is_bit_identical_to_reference() {
    let (loss, params) = compare(&[], ShareDomain::default(), 0.0, 2);
    assert_eq!(loss, 0.0);
    assert_eq!(params, 0.0);
}

#[test]
fn three_party_unmasked_matches_reference() {
    let (loss, params) = compare(&[], ShareDomain::default(), 0.0, 3);
    assert!(loss <= 1e-12 && params <= 1e-12, "{loss} {params}");
}

#[test]
fn fully_masked_float_pipeline_tracks_reference() {
    let (loss, params) = compare(&[1, 2, 3], ShareDomain::default(), 0.0, 2);
    assert!(loss <= 1e-6, "loss gap {loss}");
    assert!(params <= 1e-5, "param gap {params}");
}

#[test]
fn partially_masked_three_party_pipeline_tracks_reference() {
    let (loss, params) = compare(&[2], ShareDomain::default(), 0.0, 3);
    assert!(loss <= 1e-6, "loss gap {loss}");
    assert!(params <= 1e-5, "param gap {params}");
}

#[test]
fn ring_pipeline_stays_close_to_reference() {
    // Fixed-point truncation perturbs every shared product slightly.
    let (loss, params) = compare(&[1, 3], ShareDomain::ring(16, 64).unwrap(), 0.0, 2);
    assert!(loss <= 1e-2, "loss gap {loss}");
    assert!(params <= 1e-2, "param gap {params}");
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = blobs_config();
    let data = prepare_data(&cfg).unwrap();
    let (mut fed, _) = paired(&cfg, &data, &[1, 2]);
    let before = federation_models(&fed);
    let plan = EpochPlan::shuffled(data.train.len(), cfg.batch_size, 0.0, &mut stream_rng(1, 1)).unwrap();
    run_epoch(&plan, &mut fed).unwrap();
    let after = federation_models(&fed);
    assert!(models_diff(&before, &after) <= 1e-12);
}

#[test]
fn triple_budget_is_used_exactly() {
    let cfg = blobs_config();
    let data = prepare_data(&cfg).unwrap();
    let (mut fed, _) = paired(&cfg, &data, &[1, 2, 3]);
    let plan = EpochPlan::shuffled(data.train.len(), cfg.batch_size, cfg.lr, &mut stream_rng(1, 1)).unwrap();
    let budget = plan.triple_budget(&fed.passives[0]);
    // Per batch: 3 forward, 3 weight-gradient and 2 input-gradient products.
    assert_eq!(budget, plan.batches.len() * 8);
    run_epoch(&plan, &mut fed).unwrap();
    assert_eq!(fed.dealer.issued(), budget);
    assert_eq!(fed.passives[0].transcript.consumed_count(), budget);
    assert_eq!(fed.passives[0].pending_triples(), 0);
}

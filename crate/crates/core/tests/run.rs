mod common;

use std::collections::BTreeSet;

use common::*;
use vmask::checkpoint::Checkpoint;
use vmask::config::{Mode, RunConfig};
use vmask::run::{attack_model, prepare_data, run, run_with_data, sweep_budget, verify_barrier, write_outputs};
use vmask::transport::{Backend, Direction, TrafficEvent};

fn masked_config(mode: Mode) -> RunConfig {
    let mut cfg = blobs_config();
    cfg.mode = mode;
    cfg.attack.epochs = 5;
    cfg.attack.select_epochs = 5;
    cfg.attack.m_per_class = 2;
    cfg.aux.spec.ratio = 0.2;
    cfg
}

fn metrics_bytes(cfg: &RunConfig) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_data(cfg).unwrap();
    let out = run_with_data(cfg, &data).unwrap();
    write_outputs(&out, &data, dir.path()).unwrap();
    std::fs::read(dir.path().join("metrics.csv")).unwrap()
}

#[test]
fn metrics_are_reproducible_across_backends() {
    let mut cfg = masked_config(Mode::Vmask);
    let a = metrics_bytes(&cfg);
    assert_eq!(a, metrics_bytes(&cfg));
    cfg.transport = Backend::Tcp;
    assert_eq!(a, metrics_bytes(&cfg));
    cfg.seed += 1;
    assert_ne!(a, metrics_bytes(&cfg));
}

#[test]
fn bookkeeping_invariants_hold_for_every_variant() {
    for mode in [Mode::Vmask, Mode::VmaskAs, Mode::VmaskRs, Mode::VmaskAlls] {
        let mut cfg = masked_config(mode);
        cfg.parties = 3;
        let out = run(&cfg).unwrap();
        assert_eq!(out.epochs.len(), cfg.epochs);
        for rec in &out.epochs {
            for (u, v) in rec.masked.iter().zip(&rec.plaintext) {
                assert!(u.is_disjoint(v));
                assert_eq!(u.len() + v.len(), 3);
            }
        }
        for u in &out.epochs[0].masked {
            assert_eq!(u, &BTreeSet::from([1]), "{mode}");
        }
        if mode == Mode::VmaskAs {
            for k in 0..2 {
                for w in out.epochs.windows(2) {
                    assert!(w[0].masked[k].is_subset(&w[1].masked[k]));
                }
            }
        }
        if mode == Mode::VmaskAlls {
            assert!(out.epochs[1..].iter().all(|r| r.masked.iter().all(|u| u.len() == 3)));
        }
        verify_barrier(&out.traffic).unwrap();
    }
}

#[test]
fn vanilla_run_never_masks() {
    let mut cfg = vanilla(masked_config(Mode::Vanilla));
    cfg.epochs = 15;
    let out = run(&cfg).unwrap();
    assert!(out.selections.is_empty());
    assert_eq!(out.mask_ratio, 0.0);
    assert!(out
        .traffic
        .iter()
        .flatten()
        .all(|e| !matches!(e.kind, "LayerShare" | "LayerReconstruct")));
    assert!(out.best_test_accuracy > 0.5);
}

#[test]
fn barrier_check_rejects_training_after_masking() {
    let ev = |epoch, kind| TrafficEvent {
        epoch,
        direction: Direction::Sent,
        peer: 1,
        kind,
        bytes: 8,
    };
    let ok = vec![vec![ev(1, "Embedding"), ev(1, "LayerShare"), ev(2, "Embedding")]];
    verify_barrier(&ok).unwrap();
    let bad = vec![vec![ev(1, "LayerShare"), ev(1, "Embedding")]];
    assert!(verify_barrier(&bad).is_err());
    let backwards = vec![vec![ev(2, "Embedding"), ev(1, "Embedding")]];
    assert!(verify_barrier(&backwards).is_err());
}

#[test]
fn outputs_and_checkpoint_attack_round_trip() {
    let mut cfg = masked_config(Mode::Vmask);
    cfg.write_embeddings = true;
    let data = prepare_data(&cfg).unwrap();
    let out = run_with_data(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&out, &data, dir.path()).unwrap();
    for f in [
        "metrics.csv",
        "timing.csv",
        "selection.csv",
        "attack.csv",
        "embeddings.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let ck = Checkpoint::load(&dir.path().join("checkpoint-final-party0.json")).unwrap();
    assert_eq!(ck.model, out.final_models[0]);
    let again = attack_model(&ck.config, &data, 0, &ck.model, "final").unwrap();
    assert_eq!(again.best, out.attack(0, "final").unwrap().best);
}

#[test]
fn scratch_baseline_only_attacks() {
    let mut cfg = masked_config(Mode::ScratchBaseline);
    cfg.parties = 3;
    let out = run(&cfg).unwrap();
    assert!(out.epochs.is_empty());
    assert_eq!(out.attacks.len(), 2);
    assert!(out.attacks.iter().all(|a| a.target == "scratch"));
}

#[test]
fn sweep_needs_descending_budgets() {
    let cfg = masked_config(Mode::Vmask);
    assert!(sweep_budget(&cfg, &[0.2, 0.4]).is_err());
    assert!(sweep_budget(&cfg, &[]).unwrap().is_empty());
    let rows = sweep_budget(&cfg, &[1.0, 0.0]).unwrap();
    assert_eq!(rows.len(), 2);
    // A budget of 0 can never be met, so every layer is masked after the
    // first epoch: (1 + 3 + 3) / 9.
    assert!(rows[1].mask_ratio >= rows[0].mask_ratio);
    assert!((rows[1].mask_ratio - 7.0 / 9.0).abs() < 1e-12);
}

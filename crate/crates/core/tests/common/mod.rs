#![allow(dead_code)]

use std::collections::BTreeSet;

use vmask::config::{DatasetSpec, Mode, RunConfig};
use vmask::masking::mask_transition;
use vmask::nn::ModelParams;
use vmask::reference::ReferenceTrainer;
use vmask::run::{build_federation, PreparedData};
use vmask::secure_train::{reconstructed_bottoms, Federation};

pub fn blobs_config() -> RunConfig {
    RunConfig {
        dataset: DatasetSpec::Blobs {
            samples: 120,
            features: 10,
            classes: 3,
            spread: 1.0,
        },
        epochs: 3,
        ..RunConfig::default()
    }
}

pub fn vanilla(mut cfg: RunConfig) -> RunConfig {
    cfg.mode = Mode::Vanilla;
    cfg
}

/// A federation with every passive layer in `masked`, plus a reference
/// trainer starting from the same plaintext parameters.
pub fn paired(cfg: &RunConfig, data: &PreparedData, masked: &[usize]) -> (Federation, ReferenceTrainer) {
    let mut fed = build_federation(cfg, data).unwrap();
    let u: BTreeSet<usize> = masked.iter().copied().collect();
    {
        let Federation { passives, active, .. } = &mut fed;
        for p in passives.iter_mut() {
            mask_transition(p, active, &u).unwrap();
        }
    }
    let mut bottoms = reconstructed_bottoms(&fed).unwrap();
    bottoms.push(fed.active.bottom.clone());
    let reference = ReferenceTrainer::new(
        bottoms,
        fed.active.top.clone(),
        data.train_blocks.clone(),
        data.train.labels.clone(),
    )
    .unwrap();
    (fed, reference)
}

/// Largest absolute parameter difference between two plaintext models.
pub fn max_param_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    a.layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| {
            let (wx, bx) = x.plain("compare").unwrap();
            let (wy, by) = y.plain("compare").unwrap();
            wx.max_abs_diff(wy).unwrap().max(bx.max_abs_diff(by).unwrap())
        })
        .fold(0.0, f64::max)
}

/// Federation parameters in plaintext: passive bottoms (rebuilt), active
/// bottom, top.
pub fn federation_models(fed: &Federation) -> Vec<ModelParams> {
    let mut v = reconstructed_bottoms(fed).unwrap();
    v.push(fed.active.bottom.clone());
    v.push(fed.active.top.clone());
    v
}

pub fn reference_models(r: &ReferenceTrainer) -> Vec<ModelParams> {
    let mut v = r.bottoms.clone();
    v.push(r.top.clone());
    v
}

pub fn models_diff(a: &[ModelParams], b: &[ModelParams]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| max_param_diff(x, y)).fold(0.0, f64::max)
}

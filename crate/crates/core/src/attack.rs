//! Model-completion attack: a passive party with a handful of labelled rows
//! stacks a fresh classification head on its bottom model and fine-tunes the
//! pair, then measures how well it labels the remaining rows.

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{model_backward, model_forward, predict, sgd_step, softmax_ce, Activation, ModelParams, ModelRole};
use crate::tensor::{accuracy, DenseTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttackDataset {
    pub train_x: DenseTensor,
    pub train_y: Vec<usize>,
    pub test_x: DenseTensor,
    pub test_y: Vec<usize>,
    pub num_classes: usize,
}

/// `m_per_class` rows of every class present go to the training split. Of the
/// remaining rows, a fraction `eval_fraction` (1.0 keeps all of them) becomes
/// the test split.
pub fn build_attack_dataset<R: RngCore + ?Sized>(
    features: &DenseTensor,
    labels: &[usize],
    num_classes: usize,
    m_per_class: usize,
    eval_fraction: f64,
    rng: &mut R,
) -> Result<AttackDataset> {
    if m_per_class == 0 {
        return Err(Error::InvalidConfig(
            "attack needs at least one known label per class".into(),
        ));
    }
    if features.rows() != labels.len() {
        return Err(Error::shape(
            "build_attack_dataset labels",
            features.rows(),
            labels.len(),
        ));
    }
    if !(eval_fraction > 0.0 && eval_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("eval fraction {eval_fraction}")));
    }
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() <= m_per_class {
            return Err(Error::InsufficientSamples {
                class,
                need: m_per_class + 1,
                have: members.len(),
            });
        }
        members.shuffle(rng);
        train.extend_from_slice(&members[..m_per_class]);
        rest.extend_from_slice(&members[m_per_class..]);
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::InvalidConfig(format!("label {bad} outside 0..{num_classes}")));
    }
    rest.shuffle(rng);
    rest.truncate(((rest.len() as f64 * eval_fraction).round() as usize).max(1));
    train.sort_unstable();
    rest.sort_unstable();
    Ok(AttackDataset {
        train_x: features.select_rows(&train),
        train_y: train.iter().map(|&i| labels[i]).collect(),
        test_x: features.select_rows(&rest),
        test_y: rest.iter().map(|&i| labels[i]).collect(),
        num_classes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// Test accuracy after each fine-tuning epoch.
    pub per_epoch: Vec<f64>,
    /// Best test accuracy over all epochs; 0 when no epoch ran.
    pub best: f64,
}

/// Fine-tunes `bottom` with a fresh two-layer head on the training split for
/// `epochs` full-batch steps. Training stops early if the parameters stop
/// being finite, which happens when the bottom model is a random-looking
/// share of huge magnitude.
pub fn mc_attack<R: RngCore + ?Sized>(
    dataset: &AttackDataset,
    bottom: &ModelParams,
    head_hidden: usize,
    epochs: usize,
    lr: f64,
    rng: &mut R,
) -> Result<AttackReport> {
    if !bottom.masked_layers().is_empty() {
        return Err(Error::MaskedLayer {
            layer: bottom.masked_layers()[0],
            op: "mc_attack",
        });
    }
    let mut bottom = bottom.clone();
    let mut head = ModelParams::mlp(
        &[bottom.output_dim(), head_hidden, dataset.num_classes],
        Activation::Relu,
        ModelRole::InferenceHead,
        rng,
    )?;
    let mut per_epoch = Vec::with_capacity(epochs);
    let mut best = 0.0f64;
    for _ in 0..epochs {
        let (z, bottom_cache) = model_forward(&bottom, &dataset.train_x)?;
        let (logits, head_cache) = model_forward(&head, &z)?;
        let (loss, g) = softmax_ce(&logits, &dataset.train_y)?;
        if loss.is_finite() {
            let (head_grads, gz) = model_backward(&head, &head_cache, &g)?;
            let (bottom_grads, _) = model_backward(&bottom, &bottom_cache, &gz)?;
            let mut next_head = head.clone();
            let mut next_bottom = bottom.clone();
            sgd_step(&mut next_head, &head_grads, lr)?;
            sgd_step(&mut next_bottom, &bottom_grads, lr)?;
            if all_finite(&next_head) && all_finite(&next_bottom) {
                head = next_head;
                bottom = next_bottom;
            }
        }
        let acc = test_accuracy(dataset, &bottom, &head)?;
        best = best.max(acc);
        per_epoch.push(acc);
    }
    Ok(AttackReport { per_epoch, best })
}

fn all_finite(m: &ModelParams) -> bool {
    m.layers.iter().all(|l| match l.plain("all_finite") {
        Ok((w, b)) => w.data().iter().chain(b.data()).all(|v| v.is_finite()),
        Err(_) => true,
    })
}

fn test_accuracy(dataset: &AttackDataset, bottom: &ModelParams, head: &ModelParams) -> Result<f64> {
    if dataset.test_y.is_empty() {
        return Ok(0.0);
    }
    let logits = predict(head, &predict(bottom, &dataset.test_x)?)?;
    // Non-finite logits carry no usable prediction.
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Ok(0.0);
    }
    Ok(accuracy(&logits, &dataset.test_y))
}

/// What the passive party can run as a plaintext model: plaintext layers as
/// they are, masked layers replaced by its own share read as real numbers.
pub fn materialize_attacker_view(bottom: &ModelParams) -> Result<ModelParams> {
    let mut view = bottom.clone();
    for layer in &mut view.layers {
        if let Some((w, b, domain)) = layer.shares() {
            let domain = *domain;
            let (w, b) = (w.to_reals(&domain)?, b.to_reals(&domain)?);
            layer.set_plain(w, b)?;
        }
    }
    Ok(view)
}

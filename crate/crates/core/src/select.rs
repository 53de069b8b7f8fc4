//! Choosing which bottom-model layers to mask next epoch.
//!
//! Layers are ranked by their accumulated shadow-gradient L1 norm. Starting
//! from the highest, layers are added to the masked set until an attack
//! simulated against the shadow model, with the masked layers replaced by
//! fresh random parameters, falls within the privacy budget.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attack::{mc_attack, AttackDataset};
use crate::error::{Error, Result};
use crate::masking::complement;
use crate::nn::{LinearLayer, ModelGrads, ModelParams};

/// Running per-layer sum of gradient L1 norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormAccumulator {
    pub g: Vec<f64>,
}

impl GradNormAccumulator {
    pub fn new(num_layers: usize) -> Self {
        GradNormAccumulator {
            g: vec![0.0; num_layers],
        }
    }

    pub fn accumulate(&mut self, grads: &ModelGrads) -> Result<()> {
        if grads.layers.len() != self.g.len() {
            return Err(Error::shape("GradNormAccumulator", self.g.len(), grads.layers.len()));
        }
        for (g, n) in self.g.iter_mut().zip(grads.l1_norms()) {
            *g += n;
        }
        Ok(())
    }

    /// 1-based layer numbers by decreasing norm; ties keep the lower layer
    /// first.
    pub fn order(&self) -> Vec<usize> {
        let mut q: Vec<usize> = (1..=self.g.len()).collect();
        q.sort_by(|&a, &b| self.g[b - 1].total_cmp(&self.g[a - 1]).then(a.cmp(&b)));
        q
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionVariant {
    /// Restart from an empty set every epoch.
    VMask,
    /// Keep last epoch's set and only add to it.
    VMaskAS,
    /// Take VMask's count, pick that many layers uniformly at random.
    VMaskRS,
    /// Mask everything.
    VMaskALLS,
}

impl SelectionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionVariant::VMask => "vmask",
            SelectionVariant::VMaskAS => "vmask-as",
            SelectionVariant::VMaskRS => "vmask-rs",
            SelectionVariant::VMaskALLS => "vmask-alls",
        }
    }
}

/// Label-inference accuracy of an attack against a shadow whose masked
/// layers have been replaced.
pub trait LeakageEstimator {
    fn estimate(&mut self, shadow_masked: &ModelParams) -> Result<f64>;
}

/// The estimator used in training: a model-completion attack on the
/// auxiliary attack dataset.
pub struct McLeakage<'a, R: RngCore> {
    pub dataset: &'a AttackDataset,
    pub head_hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub rng: &'a mut R,
}

impl<R: RngCore> LeakageEstimator for McLeakage<'_, R> {
    fn estimate(&mut self, shadow_masked: &ModelParams) -> Result<f64> {
        estimate_leakage(
            shadow_masked,
            self.dataset,
            self.head_hidden,
            self.epochs,
            self.lr,
            self.rng,
        )
    }
}

pub fn estimate_leakage<R: RngCore + ?Sized>(
    shadow_masked: &ModelParams,
    dataset: &AttackDataset,
    head_hidden: usize,
    epochs: usize,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    Ok(mc_attack(dataset, shadow_masked, head_hidden, epochs, lr, rng)?.best)
}

/// Copy of `shadow` with the layers in `masked` replaced by freshly
/// initialized ones.
pub fn mask_shadow<R: RngCore + ?Sized>(shadow: &ModelParams, masked: &BTreeSet<usize>, rng: &mut R) -> ModelParams {
    let mut m = shadow.clone();
    for &u in masked {
        let l = &m.layers[u - 1];
        m.layers[u - 1] = LinearLayer::init(l.in_dim(), l.out_dim(), rng);
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub u_next: BTreeSet<usize>,
    pub v_next: BTreeSet<usize>,
    /// Every simulated attack accuracy, in the order they were run.
    pub estimates: Vec<f64>,
}

impl Selection {
    pub fn last_estimate(&self) -> Option<f64> {
        self.estimates.last().copied()
    }
}

/// Greedy selection for one passive party. `rng` supplies the random
/// replacement layers and, for the random variant, the sampled layers.
pub fn select_layers<R: RngCore + ?Sized>(
    shadow: &ModelParams,
    u_prev: &BTreeSet<usize>,
    budget: f64,
    g: &GradNormAccumulator,
    variant: SelectionVariant,
    estimator: &mut dyn LeakageEstimator,
    rng: &mut R,
) -> Result<Selection> {
    let l = shadow.num_layers();
    if g.g.len() != l {
        return Err(Error::shape("select_layers norms", l, g.g.len()));
    }
    if !(0.0..=1.0).contains(&budget) {
        return Err(Error::InvalidConfig(format!("privacy budget {budget}")));
    }
    if variant == SelectionVariant::VMaskALLS {
        return Ok(Selection {
            u_next: (1..=l).collect(),
            v_next: BTreeSet::new(),
            estimates: Vec::new(),
        });
    }

    let (mut u, q): (BTreeSet<usize>, Vec<usize>) = match variant {
        SelectionVariant::VMaskAS => (
            u_prev.clone(),
            g.order().into_iter().filter(|j| !u_prev.contains(j)).collect(),
        ),
        _ => (BTreeSet::new(), g.order()),
    };
    let mut q = q.into_iter();
    let mut estimates = Vec::new();
    loop {
        let eps = estimator.estimate(&mask_shadow(shadow, &u, rng))?;
        estimates.push(eps);
        if eps <= budget {
            break;
        }
        match q.next() {
            Some(next) => {
                u.insert(next);
            }
            None => break,
        }
    }

    if variant == SelectionVariant::VMaskRS {
        u = sample(rng, l, u.len()).into_iter().map(|i| i + 1).collect();
    }
    Ok(Selection {
        v_next: complement(&u, l),
        u_next: u,
        estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerGrad, ModelRole};
    use crate::rng::stream_rng;
    use crate::tensor::DenseTensor;

    /// Returns fixed accuracies in order, then the last one forever.
    struct Scripted(Vec<f64>, usize);

    impl LeakageEstimator for Scripted {
        fn estimate(&mut self, _: &ModelParams) -> Result<f64> {
            let v = self.0[self.1.min(self.0.len() - 1)];
            self.1 += 1;
            Ok(v)
        }
    }

    fn shadow() -> ModelParams {
        ModelParams::mlp(
            &[4, 3, 3, 2],
            Activation::Relu,
            ModelRole::Shadow,
            &mut stream_rng(0, 0),
        )
        .unwrap()
    }

    fn acc(g: &[f64]) -> GradNormAccumulator {
        GradNormAccumulator { g: g.to_vec() }
    }

    #[test]
    fn accumulate_l1() {
        let mut a = GradNormAccumulator::new(3);
        let grads = ModelGrads {
            layers: vec![
                LayerGrad {
                    weights: DenseTensor::from_rows(&[vec![1.0, -2.0]]).unwrap(),
                    bias: DenseTensor::row_vector(vec![0.0]),
                },
                LayerGrad {
                    weights: DenseTensor::from_rows(&[vec![0.5]]).unwrap(),
                    bias: DenseTensor::row_vector(vec![-0.5]),
                },
                LayerGrad {
                    weights: DenseTensor::from_rows(&[vec![2.0]]).unwrap(),
                    bias: DenseTensor::row_vector(vec![0.0]),
                },
            ],
        };
        a.accumulate(&grads).unwrap();
        assert_eq!(a.g, vec![3.0, 1.0, 2.0]);
        a.accumulate(&grads).unwrap();
        assert_eq!(a.g, vec![6.0, 2.0, 4.0]);
    }

    #[test]
    fn order_breaks_ties_low() {
        assert_eq!(acc(&[1.0, 5.0, 5.0, 0.0]).order(), vec![2, 3, 1, 4]);
    }

    #[test]
    fn two_picks_follow_norms() {
        let mut est = Scripted(vec![0.9, 0.6, 0.2], 0);
        let s = select_layers(
            &shadow(),
            &BTreeSet::new(),
            0.3,
            &acc(&[10.0, 1.0, 5.0]),
            SelectionVariant::VMask,
            &mut est,
            &mut stream_rng(1, 0),
        )
        .unwrap();
        assert_eq!(s.u_next, BTreeSet::from([1, 3]));
        assert_eq!(s.v_next, BTreeSet::from([2]));
        assert_eq!(s.estimates, vec![0.9, 0.6, 0.2]);
    }

    #[test]
    fn budget_extremes() {
        let mut est = Scripted(vec![0.7], 0);
        let s = select_layers(
            &shadow(),
            &BTreeSet::from([2]),
            1.0,
            &acc(&[1.0, 2.0, 3.0]),
            SelectionVariant::VMask,
            &mut est,
            &mut stream_rng(1, 0),
        )
        .unwrap();
        assert!(s.u_next.is_empty());
        let mut est = Scripted(vec![0.1], 0);
        let s = select_layers(
            &shadow(),
            &BTreeSet::new(),
            0.0,
            &acc(&[1.0, 2.0, 3.0]),
            SelectionVariant::VMask,
            &mut est,
            &mut stream_rng(1, 0),
        )
        .unwrap();
        assert_eq!(s.u_next, BTreeSet::from([1, 2, 3]));
        assert_eq!(s.estimates.len(), 4);
    }

    #[test]
    fn accumulative_keeps_previous() {
        let mut est = Scripted(vec![0.9, 0.1], 0);
        let s = select_layers(
            &shadow(),
            &BTreeSet::from([3]),
            0.3,
            &acc(&[1.0, 2.0, 9.0]),
            SelectionVariant::VMaskAS,
            &mut est,
            &mut stream_rng(1, 0),
        )
        .unwrap();
        assert_eq!(s.u_next, BTreeSet::from([2, 3]));
    }

    #[test]
    fn random_variant_keeps_count() {
        let mut est = Scripted(vec![0.9, 0.6, 0.2], 0);
        let s = select_layers(
            &shadow(),
            &BTreeSet::new(),
            0.3,
            &acc(&[10.0, 1.0, 5.0]),
            SelectionVariant::VMaskRS,
            &mut est,
            &mut stream_rng(1, 0),
        )
        .unwrap();
        assert_eq!(s.u_next.len(), 2);
        let mut est = Scripted(vec![0.9], 0);
        let s = select_layers(
            &shadow(),
            &BTreeSet::new(),
            0.3,
            &acc(&[1.0, 1.0, 1.0]),
            SelectionVariant::VMaskALLS,
            &mut est,
            &mut stream_rng(1, 0),
        )
        .unwrap();
        assert_eq!(s.u_next.len(), 3);
        assert!(s.estimates.is_empty());
    }
}

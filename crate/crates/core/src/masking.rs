//! Moving bottom-model layers between plaintext and secret-shared form.
//!
//! Between epochs, layers entering the masked set are shared by their owner
//! and the active party perturbs its share with Gaussian noise; layers leaving
//! the masked set are perturbed the same way and handed back for
//! reconstruction. The noise keeps the passive party from learning exact
//! parameters at either boundary.

use std::collections::BTreeSet;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::party::{ActiveParty, LayerShares, PassiveParty};
use crate::share::{reconstruct_from, share, ShareDomain, ShareTensor};
use crate::tensor::DenseTensor;
use crate::transport::{unexpected, Message};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { sigma: 0.01 }
    }
}

impl NoiseConfig {
    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::InvalidConfig(format!("noise sigma {sigma}")));
        }
        Ok(NoiseConfig { sigma })
    }
}

/// Masked (`u`) and plaintext (`v`) layer numbers of one passive party for the
/// current and previous epoch. Layer numbers are 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskState {
    pub party: u32,
    pub num_layers: usize,
    pub u_curr: BTreeSet<usize>,
    pub u_prev: BTreeSet<usize>,
    pub v_curr: BTreeSet<usize>,
    pub v_prev: BTreeSet<usize>,
}

impl MaskState {
    /// Everything plaintext in both epochs.
    pub fn plaintext(party: u32, num_layers: usize) -> Self {
        let all: BTreeSet<usize> = (1..=num_layers).collect();
        MaskState {
            party,
            num_layers,
            u_curr: BTreeSet::new(),
            u_prev: BTreeSet::new(),
            v_curr: all.clone(),
            v_prev: all,
        }
    }

    /// The state after moving to masked set `u_next`.
    pub fn advance(&self, u_next: &BTreeSet<usize>) -> Result<MaskState> {
        if let Some(bad) = u_next.iter().find(|&&u| u == 0 || u > self.num_layers) {
            return Err(Error::InconsistentMask(format!(
                "layer {bad} outside 1..={}",
                self.num_layers
            )));
        }
        let next = MaskState {
            party: self.party,
            num_layers: self.num_layers,
            u_prev: self.u_curr.clone(),
            v_prev: self.v_curr.clone(),
            u_curr: u_next.clone(),
            v_curr: complement(u_next, self.num_layers),
        };
        next.validate()?;
        Ok(next)
    }

    pub fn delta_u(&self) -> BTreeSet<usize> {
        self.u_curr.difference(&self.u_prev).copied().collect()
    }

    pub fn delta_v(&self) -> BTreeSet<usize> {
        self.v_curr.difference(&self.v_prev).copied().collect()
    }

    /// Checks that `u` and `v` partition `1..=L` in both epochs.
    pub fn validate(&self) -> Result<()> {
        for (u, v, which) in [
            (&self.u_curr, &self.v_curr, "current"),
            (&self.u_prev, &self.v_prev, "previous"),
        ] {
            let partition = u.is_disjoint(v)
                && u.len() + v.len() == self.num_layers
                && u.iter().chain(v).all(|&j| (1..=self.num_layers).contains(&j));
            if !partition {
                return Err(Error::InconsistentMask(format!(
                    "{which} sets U={u:?} V={v:?} do not partition 1..={}",
                    self.num_layers
                )));
            }
        }
        Ok(())
    }
}

pub fn complement(u: &BTreeSet<usize>, num_layers: usize) -> BTreeSet<usize> {
    (1..=num_layers).filter(|j| !u.contains(j)).collect()
}

/// Elementwise `N(0, sigma²)` noise.
pub fn sample_noise<R: RngCore + ?Sized>(rows: usize, cols: usize, sigma: f64, rng: &mut R) -> Result<DenseTensor> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(DenseTensor::from_fn(rows, cols, |_, _| normal.sample(rng)))
}

/// Adds fresh noise to a share. Ring shares add the fixed-point encoding of
/// the noise.
fn perturb<R: RngCore + ?Sized>(s: &ShareTensor, sigma: f64, domain: &ShareDomain, rng: &mut R) -> Result<ShareTensor> {
    let [r, c] = s.shape();
    let noise = sample_noise(r, c, sigma, rng)?;
    s.add_public(&noise, domain)
}

fn perturb_layer<R: RngCore + ?Sized>(
    s: &LayerShares,
    sigma: f64,
    domain: &ShareDomain,
    rng: &mut R,
) -> Result<LayerShares> {
    Ok(LayerShares {
        weights: perturb(&s.weights, sigma, domain, rng)?,
        bias: perturb(&s.bias, sigma, domain, rng)?,
    })
}

/// Summary of one transition.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transition {
    pub shared: BTreeSet<usize>,
    pub reconstructed: BTreeSet<usize>,
}

/// Moves passive party `p` to masked set `u_next`, exchanging layer shares
/// with the active party `a`.
pub fn mask_transition(p: &mut PassiveParty, a: &mut ActiveParty, u_next: &BTreeSet<usize>) -> Result<Transition> {
    let state = p.mask.advance(u_next)?;
    let (du, dv) = (state.delta_u(), state.delta_v());
    let k = p.id;
    for &u in &du {
        if p.bottom.layers[u - 1].is_masked() || a.store.contains(k, u) {
            return Err(Error::InconsistentMask(format!(
                "party {k} layer {u} is already masked"
            )));
        }
    }
    for &v in &dv {
        if !p.bottom.layers[v - 1].is_masked() || !a.store.contains(k, v) {
            return Err(Error::InconsistentMask(format!(
                "party {k} layer {v} is not masked on both sides"
            )));
        }
    }

    passive_share_layers(p, &du)?;
    active_store_layers(a, k, &du)?;
    active_release_layers(a, k, &dv)?;
    passive_reconstruct_layers(p, &dv)?;
    p.mask = state;
    Ok(Transition {
        shared: du,
        reconstructed: dv,
    })
}

fn passive_share_layers(p: &mut PassiveParty, layers: &BTreeSet<usize>) -> Result<()> {
    for &u in layers {
        let layer = &mut p.bottom.layers[u - 1];
        let (w, b) = layer.plain("mask_transition")?;
        let sw = share(w, &p.domain, &mut p.rng)?;
        let sb = share(b, &p.domain, &mut p.rng)?;
        layer.set_masked(sw.share_a, sb.share_a, p.domain)?;
        let msg = Message::LayerShare {
            party: p.id,
            layer: u as u32,
            weights: sw.share_b,
            bias: sb.share_b,
        };
        p.endpoint.send(p.active_id, &msg)?;
    }
    Ok(())
}

fn active_store_layers(a: &mut ActiveParty, k: u32, layers: &BTreeSet<usize>) -> Result<()> {
    for &u in layers {
        let (weights, bias) = match a.endpoint.recv(k)? {
            Message::LayerShare {
                party,
                layer,
                weights,
                bias,
            } if party == k && layer as usize == u => (weights, bias),
            other => return Err(unexpected(&format!("LayerShare for party {k} layer {u}"), &other).into()),
        };
        let noisy = perturb_layer(
            &LayerShares { weights, bias },
            a.noise.sigma,
            &a.domain,
            &mut a.noise_rng,
        )?;
        a.store.insert(k, u, noisy);
    }
    Ok(())
}

fn active_release_layers(a: &mut ActiveParty, k: u32, layers: &BTreeSet<usize>) -> Result<()> {
    for &v in layers {
        let held = a
            .store
            .remove(k, v)
            .ok_or_else(|| Error::InconsistentMask(format!("no active share for party {k} layer {v}")))?;
        let noisy = perturb_layer(&held, a.noise.sigma, &a.domain, &mut a.noise_rng)?;
        let msg = Message::LayerReconstruct {
            party: k,
            layer: v as u32,
            weights: noisy.weights,
            bias: noisy.bias,
        };
        a.endpoint.send(k, &msg)?;
    }
    Ok(())
}

fn passive_reconstruct_layers(p: &mut PassiveParty, layers: &BTreeSet<usize>) -> Result<()> {
    for &v in layers {
        let (weights, bias) = match p.endpoint.recv(p.active_id)? {
            Message::LayerReconstruct {
                party,
                layer,
                weights,
                bias,
            } if party == p.id && layer as usize == v => (weights, bias),
            other => return Err(unexpected(&format!("LayerReconstruct for layer {v}"), &other).into()),
        };
        let layer = &mut p.bottom.layers[v - 1];
        let (own_w, own_b, domain) = layer
            .shares()
            .ok_or_else(|| Error::InconsistentMask(format!("layer {v} is not masked")))?;
        let domain = *domain;
        let w = reconstruct_from(own_w, &weights, &domain)?;
        let b = reconstruct_from(own_b, &bias, &domain)?;
        layer.set_plain(w, b)?;
    }
    Ok(())
}

/// `Σ_t L_t / (T·L)` for per-epoch masked-layer counts `counts`.
pub fn mask_ratio(counts: &[usize], num_layers: usize) -> f64 {
    if counts.is_empty() || num_layers == 0 {
        return 0.0;
    }
    let total: usize = counts.iter().sum();
    total as f64 / (counts.len() * num_layers) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DatasetSpec, RunConfig};
    use crate::party::reconstruct_bottom;
    use crate::rng::stream_rng;
    use crate::run::{build_federation, prepare_data};
    use crate::secure_train::Federation;
    use crate::share::ShareDomain;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    fn small_federation(sigma: f64, domain: ShareDomain) -> Federation {
        let cfg = RunConfig {
            dataset: DatasetSpec::Blobs {
                samples: 60,
                features: 6,
                classes: 3,
                spread: 1.0,
            },
            sigma,
            domain,
            ..RunConfig::default()
        };
        let data = prepare_data(&cfg).unwrap();
        build_federation(&cfg, &data).unwrap()
    }

    #[test]
    fn advance_keeps_partition() {
        let s = MaskState::plaintext(0, 3);
        let s1 = s.advance(&set(&[1])).unwrap();
        assert_eq!(s1.delta_u(), set(&[1]));
        assert!(s1.delta_v().is_empty());
        let s2 = s1.advance(&set(&[2, 3])).unwrap();
        assert_eq!(s2.delta_u(), set(&[2, 3]));
        assert_eq!(s2.delta_v(), set(&[1]));
        assert_eq!(s2.u_curr.len() + s2.v_curr.len(), 3);
        assert!(s2.advance(&set(&[4])).is_err());
        assert!(s2.advance(&set(&[0])).is_err());
    }

    #[test]
    fn unchanged_sets_move_nothing() {
        let mut fed = small_federation(0.5, ShareDomain::default());
        let Federation { passives, active, .. } = &mut fed;
        let p = &mut passives[0];
        mask_transition(p, active, &set(&[1, 3])).unwrap();
        let before = (p.bottom.clone(), active.store.clone());
        let t = mask_transition(p, active, &set(&[1, 3])).unwrap();
        assert!(t.shared.is_empty() && t.reconstructed.is_empty());
        assert_eq!(p.bottom, before.0);
        assert_eq!(active.store, before.1);
    }

    #[test]
    fn zero_noise_round_trip() {
        let mut fed = small_federation(0.0, ShareDomain::default());
        let Federation { passives, active, .. } = &mut fed;
        let p = &mut passives[0];
        let original = p.bottom.clone();
        mask_transition(p, active, &set(&[1, 2, 3])).unwrap();
        assert_eq!(p.bottom.masked_layers(), vec![1, 2, 3]);
        let view = reconstruct_bottom(p, &active.store).unwrap();
        mask_transition(p, active, &BTreeSet::new()).unwrap();
        assert!(active.store.is_empty());
        for ((a, b), c) in original.layers.iter().zip(&p.bottom.layers).zip(&view.layers) {
            let (wa, ba) = a.plain("test").unwrap();
            for other in [b, c] {
                let (wb, bb) = other.plain("test").unwrap();
                assert!(wa.max_abs_diff(wb).unwrap() <= 1e-9);
                assert!(ba.max_abs_diff(bb).unwrap() <= 1e-9);
            }
        }
    }

    #[test]
    fn ring_zero_noise_round_trip_is_exact_after_encoding() {
        let mut fed = small_federation(0.0, ShareDomain::ring(16, 64).unwrap());
        let Federation { passives, active, .. } = &mut fed;
        let p = &mut passives[0];
        let original = p.bottom.clone();
        mask_transition(p, active, &set(&[2])).unwrap();
        mask_transition(p, active, &BTreeSet::new()).unwrap();
        let (wa, _) = original.layers[1].plain("test").unwrap();
        let (wb, _) = p.bottom.layers[1].plain("test").unwrap();
        assert!(wa.max_abs_diff(wb).unwrap() <= 0.5f64.powi(16));
    }

    #[test]
    fn noise_is_reproducible_and_scaled() {
        let run = || {
            let mut fed = small_federation(0.05, ShareDomain::default());
            let Federation { passives, active, .. } = &mut fed;
            let p = &mut passives[0];
            let original = p.bottom.clone();
            mask_transition(p, active, &set(&[1])).unwrap();
            mask_transition(p, active, &BTreeSet::new()).unwrap();
            (original, p.bottom.clone())
        };
        let (original, after) = run();
        assert_eq!(run().1, after);
        let (w0, _) = original.layers[0].plain("test").unwrap();
        let (w1, _) = after.layers[0].plain("test").unwrap();
        // Two perturbations of std sigma each.
        let diffs: Vec<f64> = w1.sub(w0).unwrap().into_data();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = 0.05 * 2f64.sqrt();
        assert!((std - expected).abs() <= 0.1 * expected, "std {std}");
    }

    #[test]
    fn noise_std_within_tolerance() {
        let mut rng = stream_rng(3, 0);
        let x = sample_noise(100, 100, 0.01, &mut rng).unwrap();
        let n = x.len() as f64;
        let std = (x.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert!((std - 0.01).abs() <= 0.001);
        assert!(NoiseConfig::new(-1.0).is_err());
    }

    #[test]
    fn double_masking_is_rejected() {
        let mut fed = small_federation(0.0, ShareDomain::default());
        let Federation { passives, active, .. } = &mut fed;
        let p = &mut passives[0];
        mask_transition(p, active, &set(&[1])).unwrap();
        // Desynchronize the bookkeeping behind the transition's back.
        p.mask = MaskState::plaintext(p.id, 3);
        assert!(matches!(
            mask_transition(p, active, &set(&[1])),
            Err(Error::InconsistentMask(_))
        ));
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(mask_ratio(&[1, 1, 2, 2], 3), 0.5);
        assert_eq!(mask_ratio(&[3; 5], 3), 1.0);
        assert_eq!(mask_ratio(&[], 3), 0.0);
    }
}

//! Party state and the trusted triple dealer.
//!
//! Each party owns its data, models, randomness, transcript and transport
//! endpoint. Nothing here is shared between parties; the protocol modules
//! move information only through [`Endpoint`] messages.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{MaskState, NoiseConfig};
use crate::nn::{ModelParams, ModelRole};
use crate::rng::Rng;
use crate::share::{gen_beaver_triple, reconstruct_from, ShareDomain, ShareTensor, Transcript, TripleHalf, TripleMode};
use crate::tensor::DenseTensor;
use crate::transport::Endpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Active,
    Passive,
}

/// The active party's shares of masked layers, keyed by
/// `(passive party, 1-based layer)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShareStore {
    entries: BTreeMap<(u32, usize), LayerShares>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerShares {
    pub weights: ShareTensor,
    pub bias: ShareTensor,
}

impl ShareStore {
    pub fn get(&self, party: u32, layer: usize) -> Option<&LayerShares> {
        self.entries.get(&(party, layer))
    }

    pub fn get_mut(&mut self, party: u32, layer: usize) -> Option<&mut LayerShares> {
        self.entries.get_mut(&(party, layer))
    }

    pub fn insert(&mut self, party: u32, layer: usize, shares: LayerShares) {
        self.entries.insert((party, layer), shares);
    }

    pub fn remove(&mut self, party: u32, layer: usize) -> Option<LayerShares> {
        self.entries.remove(&(party, layer))
    }

    pub fn contains(&self, party: u32, layer: usize) -> bool {
        self.entries.contains_key(&(party, layer))
    }

    /// Layers held for `party`, ascending.
    pub fn layers(&self, party: u32) -> Vec<usize> {
        self.entries
            .keys()
            .filter(|(p, _)| *p == party)
            .map(|&(_, l)| l)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-batch state a passive party keeps between the forward and backward
/// passes. Masked layers additionally keep this party's share of the input.
#[derive(Clone, Debug, Default)]
pub(crate) struct PassiveCache {
    pub inputs: Vec<DenseTensor>,
    pub outputs: Vec<DenseTensor>,
    pub input_shares: BTreeMap<usize, ShareTensor>,
    pub batch: Option<u32>,
}

pub struct PassiveParty {
    pub id: u32,
    pub active_id: u32,
    /// This party's feature columns for the training rows.
    pub features: DenseTensor,
    /// Masked layers hold this party's share.
    pub bottom: ModelParams,
    pub domain: ShareDomain,
    pub mask: MaskState,
    pub init_seed: u64,
    pub transcript: Transcript,
    pub endpoint: Endpoint,
    pub(crate) rng: Rng,
    pub(crate) triples: VecDeque<TripleHalf>,
    pub(crate) cache: PassiveCache,
}

impl std::fmt::Debug for PassiveParty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PassiveParty")
            .field("id", &self.id)
            .field("masked", &self.bottom.masked_layers())
            .finish()
    }
}

impl PassiveParty {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        active_id: u32,
        features: DenseTensor,
        bottom: ModelParams,
        init_seed: u64,
        domain: ShareDomain,
        rng: Rng,
        endpoint: Endpoint,
    ) -> Result<Self> {
        if bottom.role != ModelRole::Bottom {
            return Err(Error::InvalidConfig("passive party needs a bottom model".into()));
        }
        if features.cols() != bottom.input_dim() {
            return Err(Error::shape(
                "PassiveParty features",
                bottom.input_dim(),
                features.cols(),
            ));
        }
        let mask = MaskState::plaintext(id, bottom.num_layers());
        Ok(PassiveParty {
            id,
            active_id,
            features,
            bottom,
            domain,
            mask,
            init_seed,
            transcript: Transcript::counting(),
            endpoint,
            rng,
            triples: VecDeque::new(),
            cache: PassiveCache::default(),
        })
    }

    pub(crate) fn next_triple(&mut self) -> Result<TripleHalf> {
        let half = self
            .triples
            .pop_front()
            .ok_or_else(|| Error::TripleExhausted(format!("passive party {} has no triple left", self.id)))?;
        self.transcript.consume(half.id)?;
        Ok(half)
    }

    pub fn pending_triples(&self) -> usize {
        self.triples.len()
    }
}

pub struct ActiveParty {
    pub id: u32,
    pub features: DenseTensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub bottom: ModelParams,
    pub top: ModelParams,
    pub store: ShareStore,
    pub domain: ShareDomain,
    pub noise: NoiseConfig,
    pub transcript: Transcript,
    pub endpoint: Endpoint,
    /// Init seeds received from passive parties, for seed-matched shadows.
    pub peer_seeds: BTreeMap<u32, u64>,
    pub(crate) noise_rng: Rng,
    pub(crate) triples: BTreeMap<u32, VecDeque<TripleHalf>>,
    pub(crate) input_shares: BTreeMap<(u32, usize), ShareTensor>,
}

impl std::fmt::Debug for ActiveParty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActiveParty")
            .field("id", &self.id)
            .field("stored_shares", &self.store.len())
            .finish()
    }
}

impl ActiveParty {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        features: DenseTensor,
        labels: Vec<usize>,
        num_classes: usize,
        bottom: ModelParams,
        top: ModelParams,
        domain: ShareDomain,
        noise: NoiseConfig,
        noise_rng: Rng,
        endpoint: Endpoint,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape("ActiveParty labels", features.rows(), labels.len()));
        }
        if features.cols() != bottom.input_dim() {
            return Err(Error::shape(
                "ActiveParty features",
                bottom.input_dim(),
                features.cols(),
            ));
        }
        if top.output_dim() != num_classes {
            return Err(Error::shape("top model output", num_classes, top.output_dim()));
        }
        if top.input_dim() != bottom.output_dim() {
            return Err(Error::shape("top model input", bottom.output_dim(), top.input_dim()));
        }
        Ok(ActiveParty {
            id,
            features,
            labels,
            num_classes,
            bottom,
            top,
            store: ShareStore::default(),
            domain,
            noise,
            transcript: Transcript::counting(),
            endpoint,
            peer_seeds: BTreeMap::new(),
            noise_rng,
            triples: BTreeMap::new(),
            input_shares: BTreeMap::new(),
        })
    }

    pub(crate) fn next_triple(&mut self, party: u32) -> Result<TripleHalf> {
        let half = self
            .triples
            .get_mut(&party)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| Error::TripleExhausted(format!("active party has no triple left for party {party}")))?;
        self.transcript.consume(half.id)?;
        Ok(half)
    }

    pub fn pending_triples(&self, party: u32) -> usize {
        self.triples.get(&party).map_or(0, VecDeque::len)
    }
}

/// Shapes of the Beaver products a masked layer needs for one batch of `b`
/// rows, in protocol order: forward `x·Wᵀ`, backward `Gᵀ·x`, backward `G·W`.
/// The first layer skips the input gradient.
pub fn layer_products(layer: usize, batch: usize, in_dim: usize, out_dim: usize) -> Vec<([usize; 2], [usize; 2])> {
    let mut v = vec![
        ([batch, in_dim], [in_dim, out_dim]),
        ([out_dim, batch], [batch, in_dim]),
    ];
    if layer > 1 {
        v.push(([batch, out_dim], [out_dim, in_dim]));
    }
    v
}

/// Trusted third party handing out Beaver triples. Each epoch gets an exact
/// budget per passive party; running past it or leaving triples unused is an
/// error, so the triple count stays auditable.
#[derive(Debug)]
pub struct Dealer {
    rng: Rng,
    domain: ShareDomain,
    budget: BTreeMap<u32, usize>,
    issued: usize,
}

impl Dealer {
    pub fn new(domain: ShareDomain, rng: Rng) -> Self {
        Dealer {
            rng,
            domain,
            budget: BTreeMap::new(),
            issued: 0,
        }
    }

    pub fn begin_epoch(&mut self, budget: BTreeMap<u32, usize>) -> Result<()> {
        self.finish_epoch()?;
        self.budget = budget;
        Ok(())
    }

    /// Fails if any party's budget was not used up.
    pub fn finish_epoch(&mut self) -> Result<()> {
        if let Some((p, left)) = self.budget.iter().find(|(_, &n)| n > 0) {
            return Err(Error::TripleExhausted(format!(
                "{left} planned triples for party {p} were never used"
            )));
        }
        self.budget.clear();
        Ok(())
    }

    pub fn remaining(&self, party: u32) -> usize {
        self.budget.get(&party).copied().unwrap_or(0)
    }

    pub fn issued(&self) -> usize {
        self.issued
    }

    /// Generates one matmul triple for `party` and returns the halves for the
    /// passive (first) and active (second) side.
    pub fn deal(&mut self, party: u32, shape_a: [usize; 2], shape_b: [usize; 2]) -> Result<(TripleHalf, TripleHalf)> {
        let left = self
            .budget
            .get_mut(&party)
            .filter(|n| **n > 0)
            .ok_or_else(|| Error::TripleExhausted(format!("dealer budget for party {party} is used up")))?;
        *left -= 1;
        self.issued += 1;
        let t = gen_beaver_triple(shape_a, shape_b, TripleMode::Matmul, &self.domain, &mut self.rng)?;
        Ok(t.split())
    }

    /// Deals all triples party `party` needs for one batch and queues the
    /// halves at both sides, in consumption order: forward products by
    /// ascending layer, then backward products by descending layer.
    pub fn deal_batch(&mut self, passive: &mut PassiveParty, active: &mut ActiveParty, batch: usize) -> Result<()> {
        let k = passive.id;
        let mut order = Vec::new();
        for &layer in &passive.mask.u_curr {
            let l = &passive.bottom.layers[layer - 1];
            order.push(layer_products(layer, batch, l.in_dim(), l.out_dim())[0]);
        }
        for &layer in passive.mask.u_curr.iter().rev() {
            let l = &passive.bottom.layers[layer - 1];
            order.extend_from_slice(&layer_products(layer, batch, l.in_dim(), l.out_dim())[1..]);
        }
        for (sa, sb) in order {
            let (first, second) = self.deal(k, sa, sb)?;
            passive.triples.push_back(first);
            active.triples.entry(k).or_default().push_back(second);
        }
        Ok(())
    }
}

/// Plaintext bottom model of passive party `k`, rebuilt from both parties'
/// shares. This is the simulator's omniscient view and is never available to
/// a real party.
pub fn reconstruct_bottom(passive: &PassiveParty, store: &ShareStore) -> Result<ModelParams> {
    let mut model = passive.bottom.clone();
    for (j, layer) in model.layers.iter_mut().enumerate() {
        if let Some((w, b, domain)) = layer.shares() {
            let domain = *domain;
            let other = store.get(passive.id, j + 1).ok_or_else(|| {
                Error::InconsistentMask(format!("party {} layer {} has no active share", passive.id, j + 1))
            })?;
            let w = reconstruct_from(w, &other.weights, &domain)?;
            let b = reconstruct_from(b, &other.bias, &domain)?;
            layer.set_plain(w, b)?;
        }
    }
    Ok(model)
}

//! One epoch of vertical training where masked bottom-model layers run under
//! two-party additive sharing.
//!
//! A masked layer is evaluated jointly by its owner (the first share holder)
//! and the active party (the second): the owner shares the layer input, both
//! sides evaluate `x·Wᵀ` with a Beaver triple, add their bias share, and the
//! active party returns its output share so the owner can reconstruct the
//! pre-activation. Activations always run on reconstructed plaintext. The
//! backward pass shares the incoming gradient, computes weight and input
//! gradients with two more triples, and each side updates its own parameter
//! share.
//!
//! A single driver steps both sides of every exchange in a fixed order; the
//! parties only see each other's data through transport messages.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::{
    fc_backward, fc_forward, layer_sgd, model_backward, model_forward, sgd_step, softmax_ce, ForwardCache, ModelParams,
};
use crate::party::{layer_products, ActiveParty, Dealer, PassiveCache, PassiveParty};
use crate::share::{finish_local, open_local, reconstruct_from, share, ShareTensor, Side, TripleHalf};
use crate::tensor::{accuracy, DenseTensor};
use crate::transport::{unexpected, Message, ShareKind};

/// Batch order and step size for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochPlan {
    /// Row indices of each batch, in execution order.
    pub batches: Vec<Vec<usize>>,
    pub lr: f64,
}

impl EpochPlan {
    /// Consecutive batches over `0..n` in the given order.
    pub fn from_order(order: &[usize], batch_size: usize, lr: f64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate {lr}")));
        }
        Ok(EpochPlan {
            batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
            lr,
        })
    }

    /// A fresh random permutation of `0..n`, cut into batches.
    pub fn shuffled<R: RngCore + ?Sized>(n: usize, batch_size: usize, lr: f64, rng: &mut R) -> Result<Self> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self::from_order(&order, batch_size, lr)
    }

    pub fn num_samples(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    /// Triples party `p` needs this epoch under its current masked set.
    pub fn triple_budget(&self, p: &PassiveParty) -> usize {
        let mut n = 0;
        for rows in &self.batches {
            for &u in &p.mask.u_curr {
                let l = &p.bottom.layers[u - 1];
                n += layer_products(u, rows.len(), l.in_dim(), l.out_dim()).len();
            }
        }
        n
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    /// Sample-weighted mean training loss.
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub batches: usize,
    pub samples: usize,
}

/// All parties of one run plus the triple dealer.
#[derive(Debug)]
pub struct Federation {
    pub passives: Vec<PassiveParty>,
    pub active: ActiveParty,
    pub dealer: Dealer,
}

/// Everything the active party holds after the forward pass of one batch.
#[derive(Clone, Debug)]
pub struct ForwardOutcome {
    pub batch: u32,
    pub rows: Vec<usize>,
    pub embeddings: Vec<DenseTensor>,
    pub active_embedding: DenseTensor,
    pub aggregated: DenseTensor,
    pub logits: DenseTensor,
    pub loss: f64,
    pub grad_logits: DenseTensor,
    bottom_cache: ForwardCache,
    top_cache: ForwardCache,
}

/// Summation aggregation, accumulated left to right in party order.
pub fn aggregate(embeddings: &[&DenseTensor]) -> Result<DenseTensor> {
    let (first, rest) = embeddings
        .split_first()
        .ok_or_else(|| Error::InvalidConfig("no embeddings to aggregate".into()))?;
    let mut z = (*first).clone();
    for e in rest {
        z.add_assign(e)?;
    }
    Ok(z)
}

pub fn secure_forward(fed: &mut Federation, batch: u32, rows: &[usize]) -> Result<ForwardOutcome> {
    if rows.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let Federation {
        passives,
        active,
        dealer,
    } = fed;
    for p in passives.iter_mut() {
        dealer.deal_batch(p, active, rows.len())?;
        passive_forward(p, active, batch, rows)
            .map_err(|e| e.context(format!("party {} forward, batch {batch}", p.id)))?;
    }

    let a = active;
    let mut embeddings = Vec::with_capacity(passives.len());
    for p in passives.iter() {
        match a.endpoint.recv(p.id)? {
            Message::Embedding {
                party,
                batch: b,
                payload,
            } if party == p.id && b == batch => {
                if payload.rows() != rows.len() {
                    return Err(Error::shape("embedding rows", rows.len(), payload.rows()));
                }
                embeddings.push(payload)
            }
            other => return Err(unexpected(&format!("Embedding from party {} batch {batch}", p.id), &other).into()),
        }
    }
    let x = a.features.select_rows(rows);
    let labels: Vec<usize> = rows.iter().map(|&r| a.labels[r]).collect();
    let (active_embedding, bottom_cache) = model_forward(&a.bottom, &x)?;
    let mut all: Vec<&DenseTensor> = embeddings.iter().collect();
    all.push(&active_embedding);
    let aggregated = aggregate(&all)?;
    let (logits, top_cache) = model_forward(&a.top, &aggregated)?;
    let (loss, grad_logits) = softmax_ce(&logits, &labels)?;
    Ok(ForwardOutcome {
        batch,
        rows: rows.to_vec(),
        embeddings,
        active_embedding,
        aggregated,
        logits,
        loss,
        grad_logits,
        bottom_cache,
        top_cache,
    })
}

pub fn secure_backward(fed: &mut Federation, fwd: &ForwardOutcome, lr: f64) -> Result<()> {
    let a = &mut fed.active;
    let (top_grads, grad_z) = model_backward(&a.top, &fwd.top_cache, &fwd.grad_logits)?;
    let (bottom_grads, _) = model_backward(&a.bottom, &fwd.bottom_cache, &grad_z)?;
    sgd_step(&mut a.top, &top_grads, lr)?;
    sgd_step(&mut a.bottom, &bottom_grads, lr)?;
    for p in &fed.passives {
        let msg = Message::EmbeddingGrad {
            party: p.id,
            batch: fwd.batch,
            payload: grad_z.clone(),
        };
        a.endpoint.send(p.id, &msg)?;
    }
    for p in fed.passives.iter_mut() {
        passive_backward(p, a, fwd.batch, lr)
            .map_err(|e| e.context(format!("party {} backward, batch {}", p.id, fwd.batch)))?;
    }
    Ok(())
}

/// Runs every batch of `plan` through the secure forward and backward pass.
pub fn run_epoch(plan: &EpochPlan, fed: &mut Federation) -> Result<EpochStats> {
    let budget: BTreeMap<u32, usize> = fed.passives.iter().map(|p| (p.id, plan.triple_budget(p))).collect();
    fed.dealer.begin_epoch(budget)?;
    let mut loss_sum = 0.0;
    let mut correct = 0.0;
    for (b, rows) in plan.batches.iter().enumerate() {
        let fwd = secure_forward(fed, b as u32, rows)?;
        let labels: Vec<usize> = rows.iter().map(|&r| fed.active.labels[r]).collect();
        loss_sum += fwd.loss * rows.len() as f64;
        correct += accuracy(&fwd.logits, &labels) * rows.len() as f64;
        secure_backward(fed, &fwd, plan.lr)?;
    }
    fed.dealer.finish_epoch()?;
    let n = plan.num_samples();
    Ok(epoch_stats(loss_sum, correct, plan.batches.len(), n))
}

pub(crate) fn epoch_stats(loss_sum: f64, correct: f64, batches: usize, n: usize) -> EpochStats {
    if n == 0 {
        return EpochStats::default();
    }
    EpochStats {
        mean_loss: loss_sum / n as f64,
        train_accuracy: correct / n as f64,
        batches,
        samples: n,
    }
}

fn passive_forward(p: &mut PassiveParty, a: &mut ActiveParty, batch: u32, rows: &[usize]) -> Result<()> {
    p.cache = PassiveCache {
        batch: Some(batch),
        ..Default::default()
    };
    let mut h = p.features.select_rows(rows);
    for j in 0..p.bottom.num_layers() {
        let pre = if p.bottom.layers[j].is_masked() {
            masked_forward(p, a, j + 1, &h)?
        } else {
            fc_forward(&p.bottom.layers[j], &h)?
        };
        let next = p.bottom.activate(j, &pre);
        p.cache.inputs.push(h);
        p.cache.outputs.push(pre);
        h = next;
    }
    let msg = Message::Embedding {
        party: p.id,
        batch,
        payload: h,
    };
    p.endpoint.send(p.active_id, &msg)?;
    Ok(())
}

fn recv_open(
    ep: &mut crate::transport::Endpoint,
    from: u32,
    layer: usize,
    step: u32,
) -> Result<(ShareTensor, ShareTensor)> {
    match ep.recv(from)? {
        Message::SharedMulOpen {
            layer: l,
            step: s,
            e,
            f,
        } if l as usize == layer && s == step => Ok((e, f)),
        other => Err(unexpected(&format!("SharedMulOpen layer {layer} step {step}"), &other).into()),
    }
}

fn recv_share(ep: &mut crate::transport::Endpoint, from: u32, kind: ShareKind, layer: usize) -> Result<ShareTensor> {
    match ep.recv(from)? {
        Message::ShareTransfer {
            kind: k,
            layer: l,
            payload,
        } if k == kind && l as usize == layer => Ok(payload),
        other => Err(unexpected(&format!("ShareTransfer {kind:?} layer {layer}"), &other).into()),
    }
}

fn send_open(
    ep: &mut crate::transport::Endpoint,
    to: u32,
    layer: usize,
    step: u32,
    open: &(ShareTensor, ShareTensor),
) -> Result<()> {
    let msg = Message::SharedMulOpen {
        layer: layer as u32,
        step,
        e: open.0.clone(),
        f: open.1.clone(),
    };
    Ok(ep.send(to, &msg)?)
}

/// Combines both parties' masked differences into the opened values.
fn opened(
    mine: &(ShareTensor, ShareTensor),
    theirs: &(ShareTensor, ShareTensor),
) -> Result<(ShareTensor, ShareTensor)> {
    Ok((mine.0.add(&theirs.0)?, mine.1.add(&theirs.1)?))
}

fn finish(
    side: Side,
    mine: &(ShareTensor, ShareTensor),
    theirs: &(ShareTensor, ShareTensor),
    half: &TripleHalf,
    p_domain: &crate::share::ShareDomain,
    transcript: &mut crate::share::Transcript,
) -> Result<ShareTensor> {
    let (e, f) = opened(mine, theirs)?;
    transcript.record(half.id, &e, &f);
    finish_local(side, &e, &f, half, p_domain)
}

fn masked_forward(p: &mut PassiveParty, a: &mut ActiveParty, layer: usize, x: &DenseTensor) -> Result<DenseTensor> {
    let domain = p.domain;
    let sx = share(x, &domain, &mut p.rng)?;
    let msg = Message::ShareTransfer {
        kind: ShareKind::Input,
        layer: layer as u32,
        payload: sx.share_b,
    };
    p.endpoint.send(p.active_id, &msg)?;
    let half = p.next_triple()?;
    let (w, b, _) = p.bottom.layers[layer - 1].shares().ok_or(Error::MaskedLayer {
        layer,
        op: "masked_forward",
    })?;
    let (w_t, b) = (w.transpose(), b.clone());
    let mine = open_local(&sx.share_a, &w_t, &half)?;
    send_open(&mut p.endpoint, p.active_id, layer, 0, &mine)?;
    p.cache.input_shares.insert(layer, sx.share_a);

    active_masked_forward(a, p.id, layer)?;

    let theirs = recv_open(&mut p.endpoint, p.active_id, layer, 0)?;
    let z = finish(Side::First, &mine, &theirs, &half, &domain, &mut p.transcript)?.add_row(&b)?;
    let other = recv_share(&mut p.endpoint, p.active_id, ShareKind::Output, layer)?;
    reconstruct_from(&z, &other, &domain)
}

fn active_masked_forward(a: &mut ActiveParty, k: u32, layer: usize) -> Result<()> {
    let domain = a.domain;
    let x = recv_share(&mut a.endpoint, k, ShareKind::Input, layer)?;
    let theirs = recv_open(&mut a.endpoint, k, layer, 0)?;
    let half = a.next_triple(k)?;
    let held = a
        .store
        .get(k, layer)
        .ok_or_else(|| Error::InconsistentMask(format!("no active share for party {k} layer {layer}")))?;
    let (w_t, b) = (held.weights.transpose(), held.bias.clone());
    let mine = open_local(&x, &w_t, &half)?;
    send_open(&mut a.endpoint, k, layer, 0, &mine)?;
    let z = finish(Side::Second, &mine, &theirs, &half, &domain, &mut a.transcript)?.add_row(&b)?;
    let msg = Message::ShareTransfer {
        kind: ShareKind::Output,
        layer: layer as u32,
        payload: z,
    };
    a.endpoint.send(k, &msg)?;
    a.input_shares.insert((k, layer), x);
    Ok(())
}

fn passive_backward(p: &mut PassiveParty, a: &mut ActiveParty, batch: u32, lr: f64) -> Result<()> {
    if p.cache.batch != Some(batch) {
        return Err(Error::InvalidConfig(format!(
            "backward for batch {batch} without a matching forward pass"
        )));
    }
    let mut g = match p.endpoint.recv(p.active_id)? {
        Message::EmbeddingGrad {
            party,
            batch: b,
            payload,
        } if party == p.id && b == batch => payload,
        other => return Err(unexpected(&format!("EmbeddingGrad batch {batch}"), &other).into()),
    };
    let cache = std::mem::take(&mut p.cache);
    for j in (0..p.bottom.num_layers()).rev() {
        let g_pre = p.bottom.activate_backward(j, &cache.outputs[j], &g)?;
        if p.bottom.layers[j].is_masked() {
            let x_share = cache
                .input_shares
                .get(&(j + 1))
                .ok_or_else(|| Error::InconsistentMask(format!("no cached input share for layer {}", j + 1)))?;
            match masked_backward(p, a, j + 1, &g_pre, x_share, lr)? {
                Some(g_in) => g = g_in,
                None => break,
            }
        } else {
            let (lg, g_in) = fc_backward(&p.bottom.layers[j], &cache.inputs[j], &g_pre)?;
            layer_sgd(&mut p.bottom.layers[j], &lg, lr)?;
            g = g_in;
        }
    }
    Ok(())
}

fn masked_backward(
    p: &mut PassiveParty,
    a: &mut ActiveParty,
    layer: usize,
    grad: &DenseTensor,
    x_share: &ShareTensor,
    lr: f64,
) -> Result<Option<DenseTensor>> {
    let domain = p.domain;
    let sg = share(grad, &domain, &mut p.rng)?;
    let msg = Message::ShareTransfer {
        kind: ShareKind::Gradient,
        layer: layer as u32,
        payload: sg.share_b,
    };
    p.endpoint.send(p.active_id, &msg)?;
    let g = sg.share_a;

    let h_w = p.next_triple()?;
    let open_w = open_local(&g.transpose(), x_share, &h_w)?;
    send_open(&mut p.endpoint, p.active_id, layer, 1, &open_w)?;
    let input_grad = if layer > 1 {
        let h_x = p.next_triple()?;
        let (w, _, _) = p.bottom.layers[layer - 1].shares().ok_or(Error::MaskedLayer {
            layer,
            op: "masked_backward",
        })?;
        let open_x = open_local(&g, w, &h_x)?;
        send_open(&mut p.endpoint, p.active_id, layer, 2, &open_x)?;
        Some((h_x, open_x))
    } else {
        None
    };

    active_masked_backward(a, p.id, layer, lr)?;

    let theirs = recv_open(&mut p.endpoint, p.active_id, layer, 1)?;
    let dw = finish(Side::First, &open_w, &theirs, &h_w, &domain, &mut p.transcript)?;
    let dx = match &input_grad {
        Some((h_x, open_x)) => {
            let theirs = recv_open(&mut p.endpoint, p.active_id, layer, 2)?;
            Some(finish(Side::First, open_x, &theirs, h_x, &domain, &mut p.transcript)?)
        }
        None => None,
    };
    let db = g.column_sums();
    let (w, b, _) = p.bottom.layers[layer - 1].shares_mut().ok_or(Error::MaskedLayer {
        layer,
        op: "masked_backward",
    })?;
    *w = w.sub(&dw.scale_public(lr, &domain, Side::First)?)?;
    *b = b.sub(&db.scale_public(lr, &domain, Side::First)?)?;

    match dx {
        Some(dx) => {
            let other = recv_share(&mut p.endpoint, p.active_id, ShareKind::InputGrad, layer)?;
            Ok(Some(reconstruct_from(&dx, &other, &domain)?))
        }
        None => Ok(None),
    }
}

fn active_masked_backward(a: &mut ActiveParty, k: u32, layer: usize, lr: f64) -> Result<()> {
    let domain = a.domain;
    let g = recv_share(&mut a.endpoint, k, ShareKind::Gradient, layer)?;
    let x = a
        .input_shares
        .remove(&(k, layer))
        .ok_or_else(|| Error::InconsistentMask(format!("no cached input share for party {k} layer {layer}")))?;
    let theirs_w = recv_open(&mut a.endpoint, k, layer, 1)?;
    let theirs_x = if layer > 1 {
        Some(recv_open(&mut a.endpoint, k, layer, 2)?)
    } else {
        None
    };

    let h_w = a.next_triple(k)?;
    let open_w = open_local(&g.transpose(), &x, &h_w)?;
    send_open(&mut a.endpoint, k, layer, 1, &open_w)?;
    let input_grad = match theirs_x {
        Some(theirs_x) => {
            let h_x = a.next_triple(k)?;
            let held = a
                .store
                .get(k, layer)
                .ok_or_else(|| Error::InconsistentMask(format!("no active share for party {k} layer {layer}")))?;
            let open_x = open_local(&g, &held.weights, &h_x)?;
            send_open(&mut a.endpoint, k, layer, 2, &open_x)?;
            Some((h_x, open_x, theirs_x))
        }
        None => None,
    };

    let dw = finish(Side::Second, &open_w, &theirs_w, &h_w, &domain, &mut a.transcript)?;
    let dx = match &input_grad {
        Some((h_x, open_x, theirs_x)) => Some(finish(Side::Second, open_x, theirs_x, h_x, &domain, &mut a.transcript)?),
        None => None,
    };
    let db = g.column_sums();
    let held = a
        .store
        .get_mut(k, layer)
        .ok_or_else(|| Error::InconsistentMask(format!("no active share for party {k} layer {layer}")))?;
    held.weights = held.weights.sub(&dw.scale_public(lr, &domain, Side::Second)?)?;
    held.bias = held.bias.sub(&db.scale_public(lr, &domain, Side::Second)?)?;

    if let Some(dx) = dx {
        let msg = Message::ShareTransfer {
            kind: ShareKind::InputGrad,
            layer: layer as u32,
            payload: dx,
        };
        a.endpoint.send(k, &msg)?;
    }
    Ok(())
}

/// Plaintext bottom models of every passive party, rebuilt from both sides'
/// shares. Simulator-only view used for evaluation.
pub fn reconstructed_bottoms(fed: &Federation) -> Result<Vec<ModelParams>> {
    fed.passives
        .iter()
        .map(|p| crate::party::reconstruct_bottom(p, &fed.active.store))
        .collect()
}

//! The active party's replicas of passive bottom models.
//!
//! Each replica starts from the same seed as the passive model it tracks and
//! is trained on auxiliary rows through a frozen copy of the top model. Its
//! gradients stand in for the passive party's true gradients when ranking
//! layers, and the replica itself is the target of the simulated attack.

use crate::error::{Error, Result};
use crate::nn::{model_backward, model_forward, sgd_step, softmax_ce, Activation, ModelGrads, ModelParams, ModelRole};
use crate::rng::{stream, stream_rng};
use crate::secure_train::aggregate;
use crate::tensor::DenseTensor;
use rand::RngCore;

/// Init seed of passive party `k`'s bottom model for run seed `seed`.
pub fn bottom_init_seed(seed: u64, k: u32) -> u64 {
    stream_rng(seed, stream::BOTTOM_INIT + u64::from(k)).next_u64()
}

/// A bottom MLP with the given width chain, initialized from `init_seed`.
pub fn bottom_from_seed(init_seed: u64, dims: &[usize], role: ModelRole) -> Result<ModelParams> {
    let mut rng = stream_rng(init_seed, 0);
    ModelParams::mlp(dims, Activation::Relu, role, &mut rng)
}

/// Bottom models for every passive party and their bit-identical shadows.
pub fn init_seed_matched(seed: u64, dims: &[Vec<usize>]) -> Result<(Vec<ModelParams>, Vec<ModelParams>)> {
    let mut bottoms = Vec::with_capacity(dims.len());
    let mut shadows = Vec::with_capacity(dims.len());
    for (k, d) in dims.iter().enumerate() {
        let s = bottom_init_seed(seed, k as u32);
        bottoms.push(bottom_from_seed(s, d, ModelRole::Bottom)?);
        shadows.push(bottom_from_seed(s, d, ModelRole::Shadow)?);
    }
    Ok((bottoms, shadows))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShadowModel {
    pub party: u32,
    pub model: ModelParams,
    /// Auxiliary features in this party's column layout.
    pub aux: DenseTensor,
}

/// Shadows of all passive parties over one shared set of auxiliary rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowSet {
    pub shadows: Vec<ShadowModel>,
    pub aux_labels: Vec<usize>,
    /// Mean per-batch gradients from the latest update, one per shadow.
    pub last_grads: Vec<ModelGrads>,
}

impl ShadowSet {
    pub fn new(shadows: Vec<ShadowModel>, aux_labels: Vec<usize>) -> Result<Self> {
        if shadows.is_empty() {
            return Err(Error::InvalidConfig("shadow set is empty".into()));
        }
        if aux_labels.is_empty() {
            return Err(Error::InvalidConfig("auxiliary dataset has no labels".into()));
        }
        for s in &shadows {
            if s.aux.rows() != aux_labels.len() {
                return Err(Error::shape("ShadowSet aux rows", aux_labels.len(), s.aux.rows()));
            }
            if s.aux.cols() != s.model.input_dim() {
                return Err(Error::shape("ShadowSet aux columns", s.model.input_dim(), s.aux.cols()));
            }
        }
        let last_grads = shadows.iter().map(|s| ModelGrads::zeros_like(&s.model)).collect();
        Ok(ShadowSet {
            shadows,
            aux_labels,
            last_grads,
        })
    }

    pub fn get(&self, party: u32) -> Option<&ShadowModel> {
        self.shadows.iter().find(|s| s.party == party)
    }

    pub fn len(&self) -> usize {
        self.aux_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aux_labels.is_empty()
    }
}

/// One pass over the auxiliary rows in order, in batches of `batch_size`.
/// The embeddings of all shadows are summed and fed through `top`, which is
/// only read. Returns the mean per-batch gradient of each shadow, which is
/// also kept in `set.last_grads`.
pub fn shadow_model_update(
    set: &mut ShadowSet,
    top: &ModelParams,
    batch_size: usize,
    lr: f64,
) -> Result<Vec<ModelGrads>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let n = set.aux_labels.len();
    let mut sums: Vec<ModelGrads> = set.shadows.iter().map(|s| ModelGrads::zeros_like(&s.model)).collect();
    let mut batches = 0usize;
    let all: Vec<usize> = (0..n).collect();
    for rows in all.chunks(batch_size) {
        let labels: Vec<usize> = rows.iter().map(|&r| set.aux_labels[r]).collect();
        let mut embeddings = Vec::with_capacity(set.shadows.len());
        let mut caches = Vec::with_capacity(set.shadows.len());
        for s in &set.shadows {
            let (z, cache) = model_forward(&s.model, &s.aux.select_rows(rows))?;
            embeddings.push(z);
            caches.push(cache);
        }
        let refs: Vec<&DenseTensor> = embeddings.iter().collect();
        let z = aggregate(&refs)?;
        let (logits, top_cache) = model_forward(top, &z)?;
        let (_, g) = softmax_ce(&logits, &labels)?;
        let (_, grad_z) = model_backward(top, &top_cache, &g)?;
        for ((s, cache), sum) in set.shadows.iter_mut().zip(&caches).zip(&mut sums) {
            let (grads, _) = model_backward(&s.model, cache, &grad_z)?;
            sgd_step(&mut s.model, &grads, lr)?;
            sum.add_assign(&grads)?;
        }
        batches += 1;
    }
    let mean: Vec<ModelGrads> = if batches == 0 {
        sums
    } else {
        sums.iter().map(|g| g.scale(1.0 / batches as f64)).collect()
    };
    set.last_grads = mean.clone();
    Ok(mean)
}

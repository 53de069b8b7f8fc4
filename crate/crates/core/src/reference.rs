//! Single-process trainer over the same vertical split, with no sharing and
//! no message passing. Used as the plaintext oracle for the secure pipeline.

use crate::error::{Error, Result};
use crate::nn::{model_backward, model_forward, predict, sgd_step, softmax_ce, ModelParams};
use crate::secure_train::{aggregate, epoch_stats, EpochPlan, EpochStats};
use crate::tensor::{accuracy, DenseTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrainer {
    /// One bottom model per party; the last belongs to the label holder.
    pub bottoms: Vec<ModelParams>,
    pub top: ModelParams,
    /// Feature block per party, aligned with `bottoms`.
    pub features: Vec<DenseTensor>,
    pub labels: Vec<usize>,
}

impl ReferenceTrainer {
    pub fn new(
        bottoms: Vec<ModelParams>,
        top: ModelParams,
        features: Vec<DenseTensor>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if bottoms.len() != features.len() || bottoms.is_empty() {
            return Err(Error::shape("ReferenceTrainer parties", bottoms.len(), features.len()));
        }
        for (b, x) in bottoms.iter().zip(&features) {
            if x.cols() != b.input_dim() || x.rows() != labels.len() {
                return Err(Error::shape("ReferenceTrainer features", b.input_dim(), x.cols()));
            }
        }
        Ok(ReferenceTrainer {
            bottoms,
            top,
            features,
            labels,
        })
    }

    /// One SGD step on `rows`. Returns the batch loss and logits.
    pub fn train_batch(&mut self, rows: &[usize], lr: f64) -> Result<(f64, DenseTensor)> {
        let mut embeddings = Vec::with_capacity(self.bottoms.len());
        let mut caches = Vec::with_capacity(self.bottoms.len());
        for (b, x) in self.bottoms.iter().zip(&self.features) {
            let (z, cache) = model_forward(b, &x.select_rows(rows))?;
            embeddings.push(z);
            caches.push(cache);
        }
        let all: Vec<&DenseTensor> = embeddings.iter().collect();
        let agg = aggregate(&all)?;
        let (logits, top_cache) = model_forward(&self.top, &agg)?;
        let labels: Vec<usize> = rows.iter().map(|&r| self.labels[r]).collect();
        let (loss, g) = softmax_ce(&logits, &labels)?;
        let (top_grads, grad_z) = model_backward(&self.top, &top_cache, &g)?;
        let mut bottom_grads = Vec::with_capacity(self.bottoms.len());
        for (b, cache) in self.bottoms.iter().zip(&caches) {
            bottom_grads.push(model_backward(b, cache, &grad_z)?.0);
        }
        sgd_step(&mut self.top, &top_grads, lr)?;
        for (b, g) in self.bottoms.iter_mut().zip(&bottom_grads) {
            sgd_step(b, g, lr)?;
        }
        Ok((loss, logits))
    }

    pub fn run_epoch(&mut self, plan: &EpochPlan) -> Result<EpochStats> {
        let mut loss_sum = 0.0;
        let mut correct = 0.0;
        for rows in &plan.batches {
            let (loss, logits) = self.train_batch(rows, plan.lr)?;
            let labels: Vec<usize> = rows.iter().map(|&r| self.labels[r]).collect();
            loss_sum += loss * rows.len() as f64;
            correct += accuracy(&logits, &labels) * rows.len() as f64;
        }
        Ok(epoch_stats(loss_sum, correct, plan.batches.len(), plan.num_samples()))
    }

    /// Logits for feature blocks `features` (one per party).
    pub fn predict(&self, features: &[DenseTensor]) -> Result<DenseTensor> {
        evaluate_logits(&self.bottoms, &self.top, features)
    }
}

/// Logits of the full vertical model on aligned feature blocks.
pub fn evaluate_logits(bottoms: &[ModelParams], top: &ModelParams, features: &[DenseTensor]) -> Result<DenseTensor> {
    if bottoms.len() != features.len() {
        return Err(Error::shape("evaluate_logits parties", bottoms.len(), features.len()));
    }
    let mut embeddings = Vec::with_capacity(bottoms.len());
    for (b, x) in bottoms.iter().zip(features) {
        embeddings.push(predict(b, x)?);
    }
    let all: Vec<&DenseTensor> = embeddings.iter().collect();
    predict(top, &aggregate(&all)?)
}

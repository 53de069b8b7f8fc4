//! Plaintext fully connected networks: layers, ReLU, softmax cross-entropy
//! and SGD.

mod layer;
mod model;

use serde::{Deserialize, Serialize};

pub use layer::{
    fc_backward, fc_forward, relu, relu_backward, softmax_ce, LayerGrad, LayerParams, LinearLayer, MaskStatus,
};
pub use model::{
    layer_sgd, model_backward, model_forward, predict, sgd_step, Activation, ForwardCache, ModelGrads, ModelParams,
    ModelRole,
};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Features with optional class labels. Passive parties hold unlabeled
/// batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub features: DenseTensor,
    pub labels: Option<Vec<usize>>,
}

impl LabeledBatch {
    pub fn new(features: DenseTensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape("LabeledBatch", features.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::shape("LabeledBatch label", format!("< {num_classes}"), bad));
        }
        Ok(LabeledBatch {
            features,
            labels: Some(labels),
        })
    }

    pub fn unlabeled(features: DenseTensor) -> Self {
        LabeledBatch { features, labels: None }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("batch has no labels".into()))
    }
}

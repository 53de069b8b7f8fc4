use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::layer::{fc_backward, fc_forward, relu, relu_backward, LayerGrad, LinearLayer};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, DenseTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Bottom,
    Top,
    Shadow,
    InferenceHead,
}

/// A chain of linear layers with `activation` between consecutive layers
/// (never after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LinearLayer>,
    pub activation: Activation,
    pub role: ModelRole,
}

/// Per-layer gradients, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrad>,
}

impl ModelGrads {
    pub fn zeros_like(model: &ModelParams) -> Self {
        ModelGrads {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }

    pub fn l1_norms(&self) -> Vec<f64> {
        self.layers.iter().map(LayerGrad::l1_norm).collect()
    }

    pub fn add_assign(&mut self, other: &ModelGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "ModelGrads::add_assign",
                self.layers.len(),
                other.layers.len(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.add_assign(&b.weights)?;
            a.bias.add_assign(&b.bias)?;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> ModelGrads {
        ModelGrads {
            layers: self
                .layers
                .iter()
                .map(|g| LayerGrad {
                    weights: g.weights.scale(s),
                    bias: g.bias.scale(s),
                })
                .collect(),
        }
    }
}

/// Per-layer inputs and pre-activation outputs kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    pub inputs: Vec<DenseTensor>,
    pub outputs: Vec<DenseTensor>,
}

impl ModelParams {
    /// Builds an MLP with widths `dims[0] → dims[1] → …`.
    pub fn mlp<R: RngCore + ?Sized>(
        dims: &[usize],
        activation: Activation,
        role: ModelRole,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("model widths {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| LinearLayer::init(w[0], w[1], rng)).collect();
        Ok(ModelParams {
            layers,
            activation,
            role,
        })
    }

    pub fn from_layers(layers: Vec<LinearLayer>, activation: Activation, role: ModelRole) -> Result<Self> {
        let m = ModelParams {
            layers,
            activation,
            role,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("model has no layers".into()));
        }
        for (j, w) in self.layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(
                    "ModelParams chain",
                    format!("layer {} input {}", j + 2, w[0].out_dim()),
                    w[1].in_dim(),
                ));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, LinearLayer::out_dim)
    }

    /// Layer widths `[in, h1, …, out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(LinearLayer::out_dim));
        d
    }

    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        self.dims() == other.dims() && self.activation == other.activation
    }

    /// 1-based numbers of masked layers.
    pub fn masked_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_masked())
            .map(|(j, _)| j + 1)
            .collect()
    }

    /// Applies the hidden activation after layer `index` (0-based) unless it
    /// is the last layer.
    pub fn activate(&self, index: usize, pre: &DenseTensor) -> DenseTensor {
        if index + 1 < self.layers.len() && self.activation == Activation::Relu {
            relu(pre)
        } else {
            pre.clone()
        }
    }

    pub fn activate_backward(&self, index: usize, pre: &DenseTensor, grad: &DenseTensor) -> Result<DenseTensor> {
        if index + 1 < self.layers.len() && self.activation == Activation::Relu {
            relu_backward(pre, grad)
        } else {
            Ok(grad.clone())
        }
    }
}

fn tag_layer(e: Error, index: usize) -> Error {
    match e {
        Error::MaskedLayer { op, .. } => Error::MaskedLayer { layer: index + 1, op },
        other => other,
    }
}

pub fn model_forward(model: &ModelParams, x: &DenseTensor) -> Result<(DenseTensor, ForwardCache)> {
    if x.cols() != model.input_dim() {
        return Err(Error::shape(
            "model_forward",
            format!("{} input columns", model.input_dim()),
            fmt_shape(x.shape()),
        ));
    }
    let mut cache = ForwardCache::default();
    let mut h = x.clone();
    for (j, layer) in model.layers.iter().enumerate() {
        let pre = fc_forward(layer, &h).map_err(|e| tag_layer(e, j))?;
        let next = model.activate(j, &pre);
        cache.inputs.push(h);
        cache.outputs.push(pre);
        h = next;
    }
    Ok((h, cache))
}

/// Inference-only forward pass.
pub fn predict(model: &ModelParams, x: &DenseTensor) -> Result<DenseTensor> {
    let mut h = x.clone();
    for (j, layer) in model.layers.iter().enumerate() {
        let pre = fc_forward(layer, &h).map_err(|e| tag_layer(e, j))?;
        h = model.activate(j, &pre);
    }
    Ok(h)
}

/// Backpropagates `grad_out` (gradient of the loss w.r.t. the model output).
/// Returns the parameter gradients and the gradient w.r.t. the input.
pub fn model_backward(
    model: &ModelParams,
    cache: &ForwardCache,
    grad_out: &DenseTensor,
) -> Result<(ModelGrads, DenseTensor)> {
    let n = model.layers.len();
    if cache.inputs.len() != n || cache.outputs.len() != n {
        return Err(Error::shape("model_backward cache", n, cache.inputs.len()));
    }
    let mut grads = Vec::with_capacity(n);
    let mut g = grad_out.clone();
    for j in (0..n).rev() {
        let g_pre = model.activate_backward(j, &cache.outputs[j], &g)?;
        let (lg, g_in) = fc_backward(&model.layers[j], &cache.inputs[j], &g_pre).map_err(|e| tag_layer(e, j))?;
        grads.push(lg);
        g = g_in;
    }
    grads.reverse();
    Ok((ModelGrads { layers: grads }, g))
}

/// Plain SGD on every layer. Masked layers are rejected; they are updated
/// share-wise by the secure training protocol.
pub fn sgd_step(model: &mut ModelParams, grads: &ModelGrads, lr: f64) -> Result<()> {
    if grads.layers.len() != model.layers.len() {
        return Err(Error::shape("sgd_step", model.layers.len(), grads.layers.len()));
    }
    for (j, (layer, g)) in model.layers.iter().zip(&grads.layers).enumerate() {
        let (w, b) = layer.plain("sgd_step").map_err(|e| tag_layer(e, j))?;
        if w.shape() != g.weights.shape() || b.shape() != g.bias.shape() {
            return Err(Error::shape(
                "sgd_step",
                fmt_shape(w.shape()),
                fmt_shape(g.weights.shape()),
            ));
        }
    }
    for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
        layer_sgd(layer, g, lr)?;
    }
    Ok(())
}

/// SGD update of one plaintext layer.
pub fn layer_sgd(layer: &mut LinearLayer, grad: &LayerGrad, lr: f64) -> Result<()> {
    let (w, b) = layer.plain_mut("sgd_step")?;
    w.axpy_neg(lr, &grad.weights)?;
    b.axpy_neg(lr, &grad.bias)
}

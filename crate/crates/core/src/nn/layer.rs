use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::share::{ShareDomain, ShareTensor};
use crate::tensor::{fmt_shape, DenseTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStatus {
    Plaintext,
    Masked,
}

/// Parameters of a fully connected layer `y = x·Wᵀ + b`, `W ∈ R^{out×in}`.
///
/// A masked layer holds only this party's shares; reconstruction needs the
/// counterparty's share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum LayerParams {
    Plaintext {
        weights: DenseTensor,
        bias: DenseTensor,
    },
    Masked {
        weights: ShareTensor,
        bias: ShareTensor,
        domain: ShareDomain,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    in_dim: usize,
    out_dim: usize,
    params: LayerParams,
}

/// Gradient of a linear layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: DenseTensor,
    pub bias: DenseTensor,
}

impl LayerGrad {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LayerGrad {
            weights: DenseTensor::zeros(out_dim, in_dim),
            bias: DenseTensor::zeros(1, out_dim),
        }
    }

    /// L1 norm over weights and bias together.
    pub fn l1_norm(&self) -> f64 {
        self.weights.l1_norm() + self.bias.l1_norm()
    }
}

impl LinearLayer {
    pub fn new(weights: DenseTensor, bias: DenseTensor) -> Result<Self> {
        let [out_dim, in_dim] = weights.shape();
        if bias.shape() != [1, out_dim] {
            return Err(Error::shape(
                "LinearLayer::new",
                format!("bias 1x{out_dim}"),
                fmt_shape(bias.shape()),
            ));
        }
        Ok(LinearLayer {
            in_dim,
            out_dim,
            params: LayerParams::Plaintext { weights, bias },
        })
    }

    /// Uniform `±1/√in_dim` initialization for weights and bias.
    pub fn init<R: RngCore + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = DenseTensor::from_fn(out_dim, in_dim, |_, _| rng.random_range(-bound..=bound));
        let bias = DenseTensor::from_fn(1, out_dim, |_, _| rng.random_range(-bound..=bound));
        LinearLayer {
            in_dim,
            out_dim,
            params: LayerParams::Plaintext { weights, bias },
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn mask_status(&self) -> MaskStatus {
        match self.params {
            LayerParams::Plaintext { .. } => MaskStatus::Plaintext,
            LayerParams::Masked { .. } => MaskStatus::Masked,
        }
    }

    pub fn is_masked(&self) -> bool {
        self.mask_status() == MaskStatus::Masked
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    /// Plaintext weights and bias, or an error naming `op` for a masked layer.
    pub fn plain(&self, op: &'static str) -> Result<(&DenseTensor, &DenseTensor)> {
        match &self.params {
            LayerParams::Plaintext { weights, bias } => Ok((weights, bias)),
            LayerParams::Masked { .. } => Err(Error::MaskedLayer { layer: 0, op }),
        }
    }

    pub fn plain_mut(&mut self, op: &'static str) -> Result<(&mut DenseTensor, &mut DenseTensor)> {
        match &mut self.params {
            LayerParams::Plaintext { weights, bias } => Ok((weights, bias)),
            LayerParams::Masked { .. } => Err(Error::MaskedLayer { layer: 0, op }),
        }
    }

    /// Shares of a masked layer.
    pub fn shares(&self) -> Option<(&ShareTensor, &ShareTensor, &ShareDomain)> {
        match &self.params {
            LayerParams::Masked { weights, bias, domain } => Some((weights, bias, domain)),
            LayerParams::Plaintext { .. } => None,
        }
    }

    pub fn shares_mut(&mut self) -> Option<(&mut ShareTensor, &mut ShareTensor, &ShareDomain)> {
        match &mut self.params {
            LayerParams::Masked { weights, bias, domain } => Some((weights, bias, &*domain)),
            LayerParams::Plaintext { .. } => None,
        }
    }

    /// Replaces the parameters with this party's shares.
    pub fn set_masked(&mut self, weights: ShareTensor, bias: ShareTensor, domain: ShareDomain) -> Result<()> {
        if weights.shape() != [self.out_dim, self.in_dim] || bias.shape() != [1, self.out_dim] {
            return Err(Error::shape(
                "set_masked",
                format!("{}x{} / 1x{}", self.out_dim, self.in_dim, self.out_dim),
                format!("{} / {}", fmt_shape(weights.shape()), fmt_shape(bias.shape())),
            ));
        }
        self.params = LayerParams::Masked { weights, bias, domain };
        Ok(())
    }

    pub fn set_plain(&mut self, weights: DenseTensor, bias: DenseTensor) -> Result<()> {
        if weights.shape() != [self.out_dim, self.in_dim] || bias.shape() != [1, self.out_dim] {
            return Err(Error::shape(
                "set_plain",
                format!("{}x{} / 1x{}", self.out_dim, self.in_dim, self.out_dim),
                format!("{} / {}", fmt_shape(weights.shape()), fmt_shape(bias.shape())),
            ));
        }
        self.params = LayerParams::Plaintext { weights, bias };
        Ok(())
    }
}

pub fn fc_forward(layer: &LinearLayer, x: &DenseTensor) -> Result<DenseTensor> {
    let (w, b) = layer.plain("fc_forward")?;
    if x.cols() != layer.in_dim {
        return Err(Error::shape(
            "fc_forward",
            format!("{} input columns", layer.in_dim),
            fmt_shape(x.shape()),
        ));
    }
    x.matmul_t(w)?.add_row(b)
}

/// Returns `(grad_w, grad_bias, grad_in)` for `y = x·Wᵀ + b`.
pub fn fc_backward(layer: &LinearLayer, x: &DenseTensor, grad_out: &DenseTensor) -> Result<(LayerGrad, DenseTensor)> {
    let (w, _) = layer.plain("fc_backward")?;
    if x.cols() != layer.in_dim || grad_out.cols() != layer.out_dim || x.rows() != grad_out.rows() {
        return Err(Error::shape(
            "fc_backward",
            format!("Bx{} input and Bx{} gradient", layer.in_dim, layer.out_dim),
            format!("{} and {}", fmt_shape(x.shape()), fmt_shape(grad_out.shape())),
        ));
    }
    let grad_w = grad_out.t_matmul(x)?;
    let grad_b = grad_out.column_sums();
    let grad_in = grad_out.matmul(w)?;
    Ok((
        LayerGrad {
            weights: grad_w,
            bias: grad_b,
        },
        grad_in,
    ))
}

pub fn relu(x: &DenseTensor) -> DenseTensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes the gradient where the pre-activation is strictly positive; the
/// subgradient at zero is zero.
pub fn relu_backward(x: &DenseTensor, grad_out: &DenseTensor) -> Result<DenseTensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            fmt_shape(x.shape()),
            fmt_shape(grad_out.shape()),
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    DenseTensor::from_vec(x.rows(), x.cols(), data)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_ce(logits: &DenseTensor, labels: &[usize]) -> Result<(f64, DenseTensor)> {
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b || b == 0 {
        return Err(Error::shape("softmax_ce", format!("{b} labels (B ≥ 1)"), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::shape("softmax_ce", format!("label < {c}"), bad));
    }
    let mut grad = DenseTensor::zeros(b, c);
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (row[label] - max);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / sum;
            let target = if j == label { 1.0 } else { 0.0 };
            grad.set(i, j, (p - target) * inv_b);
        }
    }
    Ok((loss * inv_b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
        DenseTensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn forward_examples() {
        let x = DenseTensor::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let id = LinearLayer::new(DenseTensor::identity(3), DenseTensor::zeros(1, 3)).unwrap();
        assert_eq!(fc_forward(&id, &x).unwrap(), x);

        let b = DenseTensor::row_vector(vec![1.0, -2.0]);
        let zero = LinearLayer::new(DenseTensor::zeros(2, 3), b.clone()).unwrap();
        let y = fc_forward(&zero, &x).unwrap();
        assert_eq!(y.row(0), b.data());
        assert_eq!(y.row(1), b.data());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(2, 3, &mut rng);
        let w = rand_tensor(4, 3, &mut rng);
        let bias = rand_tensor(1, 4, &mut rng);
        let layer = LinearLayer::new(w.clone(), bias.clone()).unwrap();
        let y = fc_forward(&layer, &x).unwrap();
        for i in 0..2 {
            for o in 0..4 {
                let want: f64 = (0..3).map(|j| x.get(i, j) * w.get(o, j)).sum::<f64>() + bias.get(0, o);
                assert!((y.get(i, o) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let layer = LinearLayer::new(DenseTensor::identity(3), DenseTensor::zeros(1, 3)).unwrap();
        assert!(fc_forward(&layer, &DenseTensor::zeros(2, 4)).is_err());
        assert!(LinearLayer::new(DenseTensor::identity(3), DenseTensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn masked_layer_refuses_plaintext_path() {
        let mut layer = LinearLayer::new(DenseTensor::identity(2), DenseTensor::zeros(1, 2)).unwrap();
        let d = ShareDomain::default();
        layer
            .set_masked(
                ShareTensor::Float(DenseTensor::identity(2)),
                ShareTensor::Float(DenseTensor::zeros(1, 2)),
                d,
            )
            .unwrap();
        assert!(matches!(
            fc_forward(&layer, &DenseTensor::zeros(1, 2)),
            Err(Error::MaskedLayer { .. })
        ));
    }

    #[test]
    fn backward_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(3, 4, &mut rng);
        let layer = LinearLayer::init(4, 2, &mut rng);
        let (g, gin) = fc_backward(&layer, &x, &DenseTensor::zeros(3, 2)).unwrap();
        assert_eq!(g.weights.max_abs() + g.bias.max_abs() + gin.max_abs(), 0.0);

        let id = LinearLayer::new(DenseTensor::identity(4), DenseTensor::zeros(1, 4)).unwrap();
        let go = rand_tensor(3, 4, &mut rng);
        let (_, gin) = fc_backward(&id, &x, &go).unwrap();
        assert_eq!(gin, go);
    }

    /// Scalar loss `Σ c ⊙ fc(x)` differentiated by central differences.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for _ in 0..20 {
            let x = rand_tensor(3, 5, &mut rng);
            let layer = LinearLayer::init(5, 4, &mut rng);
            let c = rand_tensor(3, 4, &mut rng);
            let loss = |l: &LinearLayer, x: &DenseTensor| -> f64 {
                let y = fc_forward(l, x).unwrap();
                y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
            };
            let (g, gin) = fc_backward(&layer, &x, &c).unwrap();
            let (w, b) = layer.plain("t").unwrap();
            for idx in 0..w.len() {
                let mut wp = w.clone();
                wp.data_mut()[idx] += h;
                let mut wm = w.clone();
                wm.data_mut()[idx] -= h;
                let fd = (loss(&LinearLayer::new(wp, b.clone()).unwrap(), &x)
                    - loss(&LinearLayer::new(wm, b.clone()).unwrap(), &x))
                    / (2.0 * h);
                assert!(rel_err(fd, g.weights.data()[idx]) <= 1e-4);
            }
            for idx in 0..b.len() {
                let mut bp = b.clone();
                bp.data_mut()[idx] += h;
                let mut bm = b.clone();
                bm.data_mut()[idx] -= h;
                let fd = (loss(&LinearLayer::new(w.clone(), bp).unwrap(), &x)
                    - loss(&LinearLayer::new(w.clone(), bm).unwrap(), &x))
                    / (2.0 * h);
                assert!(rel_err(fd, g.bias.data()[idx]) <= 1e-4);
            }
            for idx in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= h;
                let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
                assert!(rel_err(fd, gin.data()[idx]) <= 1e-4);
            }
        }
    }

    #[test]
    fn relu_examples() {
        let x = DenseTensor::row_vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &DenseTensor::row_vector(vec![5.0, 5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(4, 4, &mut rng).map(|v| if v.abs() < 0.05 { 0.5 } else { v });
        let c = rand_tensor(4, 4, &mut rng);
        let g = relu_backward(&x, &c).unwrap();
        let h = 1e-5;
        for idx in 0..x.len() {
            let f = |d: f64| {
                let mut xp = x.clone();
                xp.data_mut()[idx] += d;
                relu(&xp).data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!(rel_err(fd, g.data()[idx]) <= 1e-4);
        }
    }

    #[test]
    fn softmax_ce_examples() {
        let (loss, _) = softmax_ce(&DenseTensor::zeros(3, 10), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);

        let mut logits = DenseTensor::zeros(1, 4);
        logits.set(0, 2, 50.0);
        let (loss, _) = softmax_ce(&logits, &[2]).unwrap();
        assert!(loss < 1e-9);

        assert!(softmax_ce(&DenseTensor::zeros(2, 3), &[0, 3]).is_err());
        assert!(softmax_ce(&DenseTensor::zeros(2, 3), &[0]).is_err());
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = rand_tensor(4, 3, &mut rng).scale(3.0);
        let labels = [0, 2, 1, 2];
        let (_, g) = softmax_ce(&logits, &labels).unwrap();
        let h = 1e-5;
        for idx in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[idx] += h;
            let mut m = logits.clone();
            m.data_mut()[idx] -= h;
            let fd = (softmax_ce(&p, &labels).unwrap().0 - softmax_ce(&m, &labels).unwrap().0) / (2.0 * h);
            assert!(rel_err(fd, g.data()[idx]) <= 1e-4);
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Fixed-point ring `Z_{2^modulus_bits}` with `frac_bits` fractional bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingParams {
    pub frac_bits: u32,
    pub modulus_bits: u32,
}

impl Default for RingParams {
    fn default() -> Self {
        RingParams {
            frac_bits: 16,
            modulus_bits: 64,
        }
    }
}

impl RingParams {
    pub fn new(frac_bits: u32, modulus_bits: u32) -> Result<Self> {
        let p = RingParams {
            frac_bits,
            modulus_bits,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modulus_bits != 32 && self.modulus_bits != 64 {
            return Err(Error::InvalidDomain(format!(
                "modulus_bits must be 32 or 64, got {}",
                self.modulus_bits
            )));
        }
        if self.frac_bits == 0 || 2 * self.frac_bits >= self.modulus_bits {
            return Err(Error::InvalidDomain(format!(
                "frac_bits must be in (0, {}), got {}",
                self.modulus_bits / 2,
                self.frac_bits
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn mask(&self) -> u64 {
        mask_for(self.modulus_bits)
    }

    pub fn scale(&self) -> f64 {
        (self.frac_bits as f64).exp2()
    }

    /// Exclusive bound on encodable magnitudes, `2^(modulus_bits − frac_bits − 1)`.
    pub fn bound(&self) -> f64 {
        ((self.modulus_bits - self.frac_bits - 1) as f64).exp2()
    }

    pub fn encode(&self, x: f64, index: usize) -> Result<u64> {
        let bound = self.bound();
        if !x.is_finite() || x.abs() >= bound {
            return Err(Error::Overflow { index, value: x, bound });
        }
        let v = (x * self.scale()).round() as i64;
        Ok((v as u64) & self.mask())
    }

    pub fn decode(&self, v: u64) -> f64 {
        self.to_signed(v) as f64 / self.scale()
    }

    /// Two's-complement interpretation of a ring element.
    #[inline]
    pub fn to_signed(&self, v: u64) -> i64 {
        let shift = 64 - self.modulus_bits;
        ((v << shift) as i64) >> shift
    }

    /// Local share truncation by `frac_bits`. The first party floors its share,
    /// the second floors the negation of its share and negates back, so the
    /// reconstruction is off by at most one unit in the last place except with
    /// probability about `|x| / 2^modulus_bits`.
    #[inline]
    pub fn truncate(&self, v: u64, side: Side) -> u64 {
        let m = self.mask();
        match side {
            Side::First => (v & m) >> self.frac_bits,
            Side::Second => (0u64.wrapping_sub((0u64.wrapping_sub(v) & m) >> self.frac_bits)) & m,
        }
    }
}

#[inline]
pub(crate) fn mask_for(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Which of the two share holders a local computation runs on. The first side
/// is the party that created the sharing (the passive party in training).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    First,
    Second,
}

/// Arithmetic domain of additive shares.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShareDomain {
    /// Real-valued shares `(x − r, r)` with `r ~ N(0, share_scale²)`.
    Float {
        #[serde(default = "default_share_scale")]
        share_scale: f64,
    },
    Ring(RingParams),
}

fn default_share_scale() -> f64 {
    100.0
}

impl Default for ShareDomain {
    fn default() -> Self {
        ShareDomain::Float {
            share_scale: default_share_scale(),
        }
    }
}

impl ShareDomain {
    pub fn ring(frac_bits: u32, modulus_bits: u32) -> Result<Self> {
        Ok(ShareDomain::Ring(RingParams::new(frac_bits, modulus_bits)?))
    }

    pub fn float(share_scale: f64) -> Self {
        ShareDomain::Float { share_scale }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ShareDomain::Float { share_scale } => {
                if !share_scale.is_finite() || *share_scale < 0.0 {
                    return Err(Error::InvalidDomain(format!("share_scale {share_scale}")));
                }
                Ok(())
            }
            ShareDomain::Ring(p) => p.validate(),
        }
    }

    pub fn ring_params(&self) -> Option<RingParams> {
        match self {
            ShareDomain::Ring(p) => Some(*p),
            ShareDomain::Float { .. } => None,
        }
    }

    /// Two domains can be combined when their arithmetic agrees. The float
    /// share scale only affects sampling, not arithmetic.
    pub fn compatible(&self, other: &ShareDomain) -> bool {
        match (self, other) {
            (ShareDomain::Float { .. }, ShareDomain::Float { .. }) => true,
            (ShareDomain::Ring(a), ShareDomain::Ring(b)) => a == b,
            _ => false,
        }
    }
}

/// Row-major matrix of ring elements, each reduced modulo `2^bits`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingTensor {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) bits: u32,
    pub(crate) data: Vec<u64>,
}

impl RingTensor {
    pub fn from_vec(rows: usize, cols: usize, bits: u32, data: Vec<u64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("RingTensor::from_vec", rows * cols, data.len()));
        }
        let m = mask_for(bits);
        Ok(RingTensor {
            rows,
            cols,
            bits,
            data: data.into_iter().map(|v| v & m).collect(),
        })
    }

    pub fn zeros(rows: usize, cols: usize, bits: u32) -> Self {
        RingTensor {
            rows,
            cols,
            bits,
            data: vec![0; rows * cols],
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }
}

/// Fixed-point encoding `round(x · 2^f) mod 2^modulus_bits`.
pub fn encode_fixed(x: &DenseTensor, domain: &ShareDomain) -> Result<RingTensor> {
    let p = domain
        .ring_params()
        .ok_or_else(|| Error::InvalidDomain("encode_fixed needs a ring domain".into()))?;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| p.encode(v, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(RingTensor {
        rows: x.rows(),
        cols: x.cols(),
        bits: p.modulus_bits,
        data,
    })
}

pub fn decode_fixed(v: &RingTensor, domain: &ShareDomain) -> Result<DenseTensor> {
    let p = domain
        .ring_params()
        .ok_or_else(|| Error::InvalidDomain("decode_fixed needs a ring domain".into()))?;
    DenseTensor::from_vec(v.rows, v.cols, v.data.iter().map(|&e| p.decode(e)).collect())
}

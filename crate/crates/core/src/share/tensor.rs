use serde::{Deserialize, Serialize};

use super::domain::{mask_for, RingParams, RingTensor, ShareDomain, Side};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, DenseTensor};

/// One party's additive share of a matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShareTensor {
    Float(DenseTensor),
    Ring(RingTensor),
}

impl ShareTensor {
    pub fn shape(&self) -> [usize; 2] {
        match self {
            ShareTensor::Float(t) => t.shape(),
            ShareTensor::Ring(t) => t.shape(),
        }
    }

    pub fn zeros_like(&self) -> ShareTensor {
        match self {
            ShareTensor::Float(t) => ShareTensor::Float(DenseTensor::zeros(t.rows(), t.cols())),
            ShareTensor::Ring(t) => ShareTensor::Ring(RingTensor::zeros(t.rows, t.cols, t.bits)),
        }
    }

    pub fn zeros(rows: usize, cols: usize, domain: &ShareDomain) -> ShareTensor {
        match domain {
            ShareDomain::Float { .. } => ShareTensor::Float(DenseTensor::zeros(rows, cols)),
            ShareDomain::Ring(p) => ShareTensor::Ring(RingTensor::zeros(rows, cols, p.modulus_bits)),
        }
    }

    pub fn matches_domain(&self, domain: &ShareDomain) -> bool {
        match (self, domain) {
            (ShareTensor::Float(_), ShareDomain::Float { .. }) => true,
            (ShareTensor::Ring(t), ShareDomain::Ring(p)) => t.bits == p.modulus_bits,
            _ => false,
        }
    }

    pub fn as_float(&self) -> Option<&DenseTensor> {
        match self {
            ShareTensor::Float(t) => Some(t),
            ShareTensor::Ring(_) => None,
        }
    }

    pub fn as_ring(&self) -> Option<&RingTensor> {
        match self {
            ShareTensor::Ring(t) => Some(t),
            ShareTensor::Float(_) => None,
        }
    }

    /// Reinterprets the share as real numbers, the view a party gets if it
    /// treats its share as if it were the parameter itself.
    pub fn to_reals(&self, domain: &ShareDomain) -> Result<DenseTensor> {
        match self {
            ShareTensor::Float(t) => Ok(t.clone()),
            ShareTensor::Ring(t) => super::domain::decode_fixed(t, domain),
        }
    }

    fn zip(
        &self,
        other: &ShareTensor,
        op: &'static str,
        ff: impl Fn(f64, f64) -> f64,
        rf: impl Fn(u64, u64) -> u64,
    ) -> Result<ShareTensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, fmt_shape(self.shape()), fmt_shape(other.shape())));
        }
        match (self, other) {
            (ShareTensor::Float(a), ShareTensor::Float(b)) => Ok(ShareTensor::Float(DenseTensor::from_vec(
                a.rows(),
                a.cols(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| ff(x, y)).collect(),
            )?)),
            (ShareTensor::Ring(a), ShareTensor::Ring(b)) if a.bits == b.bits => {
                let m = mask_for(a.bits);
                Ok(ShareTensor::Ring(RingTensor {
                    rows: a.rows,
                    cols: a.cols,
                    bits: a.bits,
                    data: a.data.iter().zip(&b.data).map(|(&x, &y)| rf(x, y) & m).collect(),
                }))
            }
            _ => Err(Error::DomainMismatch(op)),
        }
    }

    pub fn add(&self, other: &ShareTensor) -> Result<ShareTensor> {
        self.zip(other, "share add", |a, b| a + b, u64::wrapping_add)
    }

    pub fn sub(&self, other: &ShareTensor) -> Result<ShareTensor> {
        self.zip(other, "share sub", |a, b| a - b, u64::wrapping_sub)
    }

    pub fn hadamard(&self, other: &ShareTensor) -> Result<ShareTensor> {
        self.zip(other, "share hadamard", |a, b| a * b, u64::wrapping_mul)
    }

    pub fn transpose(&self) -> ShareTensor {
        match self {
            ShareTensor::Float(t) => ShareTensor::Float(t.transpose()),
            ShareTensor::Ring(t) => {
                let mut data = vec![0; t.data.len()];
                for i in 0..t.rows {
                    for j in 0..t.cols {
                        data[j * t.rows + i] = t.data[i * t.cols + j];
                    }
                }
                ShareTensor::Ring(RingTensor {
                    rows: t.cols,
                    cols: t.rows,
                    bits: t.bits,
                    data,
                })
            }
        }
    }

    pub fn matmul(&self, other: &ShareTensor) -> Result<ShareTensor> {
        match (self, other) {
            (ShareTensor::Float(a), ShareTensor::Float(b)) => Ok(ShareTensor::Float(a.matmul(b)?)),
            (ShareTensor::Ring(a), ShareTensor::Ring(b)) if a.bits == b.bits => {
                if a.cols != b.rows {
                    return Err(Error::shape("ring matmul", a.cols, fmt_shape(b.shape())));
                }
                let (m, k, n) = (a.rows, a.cols, b.cols);
                let mut out = vec![0u64; m * n];
                for i in 0..m {
                    let row = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = a.data[i * k + p];
                        for (o, &y) in row.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                            *o = o.wrapping_add(x.wrapping_mul(y));
                        }
                    }
                }
                let mask = mask_for(a.bits);
                out.iter_mut().for_each(|v| *v &= mask);
                Ok(ShareTensor::Ring(RingTensor {
                    rows: m,
                    cols: n,
                    bits: a.bits,
                    data: out,
                }))
            }
            _ => Err(Error::DomainMismatch("share matmul")),
        }
    }

    /// Adds a `1 × cols` share to every row.
    pub fn add_row(&self, row: &ShareTensor) -> Result<ShareTensor> {
        let [r, c] = self.shape();
        if row.shape() != [1, c] {
            return Err(Error::shape("share add_row", format!("1x{c}"), fmt_shape(row.shape())));
        }
        match (self, row) {
            (ShareTensor::Float(a), ShareTensor::Float(b)) => Ok(ShareTensor::Float(a.add_row(b)?)),
            (ShareTensor::Ring(a), ShareTensor::Ring(b)) if a.bits == b.bits => {
                let mask = mask_for(a.bits);
                let mut data = a.data.clone();
                for i in 0..r {
                    for j in 0..c {
                        data[i * c + j] = data[i * c + j].wrapping_add(b.data[j]) & mask;
                    }
                }
                Ok(ShareTensor::Ring(RingTensor { data, ..a.clone() }))
            }
            _ => Err(Error::DomainMismatch("share add_row")),
        }
    }

    pub fn column_sums(&self) -> ShareTensor {
        match self {
            ShareTensor::Float(t) => ShareTensor::Float(t.column_sums()),
            ShareTensor::Ring(t) => {
                let mut out = vec![0u64; t.cols];
                for row in t.data.chunks(t.cols.max(1)) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o = o.wrapping_add(v);
                    }
                }
                let mask = mask_for(t.bits);
                ShareTensor::Ring(RingTensor {
                    rows: 1,
                    cols: t.cols,
                    bits: t.bits,
                    data: out.into_iter().map(|v| v & mask).collect(),
                })
            }
        }
    }

    /// Local truncation after a fixed-point product. No-op on float shares.
    pub fn truncate(&self, params: Option<RingParams>, side: Side) -> ShareTensor {
        match (self, params) {
            (ShareTensor::Ring(t), Some(p)) => ShareTensor::Ring(RingTensor {
                data: t.data.iter().map(|&v| p.truncate(v, side)).collect(),
                ..t.clone()
            }),
            _ => self.clone(),
        }
    }

    /// Multiplies the share by a public real constant. Ring shares encode the
    /// constant with `frac_bits` and truncate locally.
    pub fn scale_public(&self, c: f64, domain: &ShareDomain, side: Side) -> Result<ShareTensor> {
        match (self, domain) {
            (ShareTensor::Float(t), ShareDomain::Float { .. }) => Ok(ShareTensor::Float(t.scale(c))),
            (ShareTensor::Ring(t), ShareDomain::Ring(p)) => {
                let enc = p.encode(c, 0)?;
                let mask = p.mask();
                Ok(ShareTensor::Ring(RingTensor {
                    data: t
                        .data
                        .iter()
                        .map(|&v| p.truncate(v.wrapping_mul(enc) & mask, side))
                        .collect(),
                    ..t.clone()
                }))
            }
            _ => Err(Error::DomainMismatch("scale_public")),
        }
    }

    /// Adds a public real matrix. Ring shares add its fixed-point encoding.
    pub fn add_public(&self, x: &DenseTensor, domain: &ShareDomain) -> Result<ShareTensor> {
        let public = match domain {
            ShareDomain::Float { .. } => ShareTensor::Float(x.clone()),
            ShareDomain::Ring(_) => ShareTensor::Ring(super::domain::encode_fixed(x, domain)?),
        };
        self.add(&public)
    }
}

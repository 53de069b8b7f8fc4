use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::domain::{encode_fixed, mask_for, RingTensor, ShareDomain};
use super::tensor::ShareTensor;
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, DenseTensor};

/// Both additive shares of a matrix. `share_a` stays with the party that
/// created the sharing, `share_b` goes to the counterparty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharePair {
    pub share_a: ShareTensor,
    pub share_b: ShareTensor,
    pub domain: ShareDomain,
}

impl SharePair {
    pub fn new(share_a: ShareTensor, share_b: ShareTensor, domain: ShareDomain) -> Result<Self> {
        if share_a.shape() != share_b.shape() {
            return Err(Error::shape(
                "SharePair::new",
                fmt_shape(share_a.shape()),
                fmt_shape(share_b.shape()),
            ));
        }
        if !share_a.matches_domain(&domain) || !share_b.matches_domain(&domain) {
            return Err(Error::DomainMismatch("SharePair::new"));
        }
        Ok(SharePair {
            share_a,
            share_b,
            domain,
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        self.share_a.shape()
    }

    /// Sum of the two shares without decoding. For ring shares this is the
    /// raw ring element.
    pub fn reconstruct_raw(&self) -> Result<ShareTensor> {
        self.share_a.add(&self.share_b)
    }

    pub fn reconstruct(&self) -> Result<DenseTensor> {
        reconstruct(self)
    }
}

/// Samples a masking share of the given shape: uniform ring elements, or
/// `N(0, share_scale²)` reals.
pub fn random_share<R: RngCore + ?Sized>(
    rows: usize,
    cols: usize,
    domain: &ShareDomain,
    rng: &mut R,
) -> Result<ShareTensor> {
    match domain {
        ShareDomain::Float { share_scale } => {
            let normal = Normal::new(0.0, *share_scale).map_err(|e| Error::InvalidDomain(e.to_string()))?;
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Ok(ShareTensor::Float(DenseTensor::from_vec(rows, cols, data)?))
        }
        ShareDomain::Ring(p) => {
            let mask = mask_for(p.modulus_bits);
            let data = (0..rows * cols).map(|_| rng.random::<u64>() & mask).collect();
            Ok(ShareTensor::Ring(RingTensor::from_vec(
                rows,
                cols,
                p.modulus_bits,
                data,
            )?))
        }
    }
}

/// Splits a plaintext matrix into two additive shares.
pub fn share<R: RngCore + ?Sized>(x: &DenseTensor, domain: &ShareDomain, rng: &mut R) -> Result<SharePair> {
    domain.validate()?;
    if let Some((i, v)) = x.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Overflow {
            index: i,
            value: *v,
            bound: f64::INFINITY,
        });
    }
    let value = match domain {
        ShareDomain::Float { .. } => ShareTensor::Float(x.clone()),
        ShareDomain::Ring(_) => ShareTensor::Ring(encode_fixed(x, domain)?),
    };
    share_encoded(&value, domain, rng)
}

/// Shares a value that is already in the domain's representation.
pub fn share_encoded<R: RngCore + ?Sized>(value: &ShareTensor, domain: &ShareDomain, rng: &mut R) -> Result<SharePair> {
    let [r, c] = value.shape();
    let share_a = random_share(r, c, domain, rng)?;
    let share_b = value.sub(&share_a)?;
    SharePair::new(share_a, share_b, *domain)
}

pub fn reconstruct(p: &SharePair) -> Result<DenseTensor> {
    reconstruct_from(&p.share_a, &p.share_b, &p.domain)
}

/// Reconstructs from two loose shares, as a party does after receiving the
/// counterparty's share.
pub fn reconstruct_from(a: &ShareTensor, b: &ShareTensor, domain: &ShareDomain) -> Result<DenseTensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("reconstruct", fmt_shape(a.shape()), fmt_shape(b.shape())));
    }
    match a.add(b)? {
        ShareTensor::Float(t) => Ok(t),
        ShareTensor::Ring(t) => super::domain::decode_fixed(&t, domain),
    }
}

/// Local addition of two sharings; needs no communication.
pub fn add_shared(x: &SharePair, y: &SharePair) -> Result<SharePair> {
    if !x.domain.compatible(&y.domain) {
        return Err(Error::DomainMismatch("add_shared"));
    }
    if x.shape() != y.shape() {
        return Err(Error::shape("add_shared", fmt_shape(x.shape()), fmt_shape(y.shape())));
    }
    SharePair::new(x.share_a.add(&y.share_a)?, x.share_b.add(&y.share_b)?, x.domain)
}

use std::collections::HashSet;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::domain::{ShareDomain, Side};
use super::pair::{random_share, share_encoded, SharePair};
use super::tensor::ShareTensor;
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, DenseTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TripleMode {
    Matmul,
    Hadamard,
}

/// Dealer-generated correlated randomness `(a, b, c = a·b)`, fully shared.
#[derive(Clone, Debug, PartialEq)]
pub struct BeaverTriple {
    pub id: u64,
    pub mode: TripleMode,
    pub a: SharePair,
    pub b: SharePair,
    pub c: SharePair,
}

/// The part of a triple a single party holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleHalf {
    pub id: u64,
    pub mode: TripleMode,
    pub a: ShareTensor,
    pub b: ShareTensor,
    pub c: ShareTensor,
}

impl BeaverTriple {
    /// Hands `share_a` of every component to the first side and `share_b` to
    /// the second.
    pub fn split(self) -> (TripleHalf, TripleHalf) {
        let first = TripleHalf {
            id: self.id,
            mode: self.mode,
            a: self.a.share_a,
            b: self.b.share_a,
            c: self.c.share_a,
        };
        let second = TripleHalf {
            id: self.id,
            mode: self.mode,
            a: self.a.share_b,
            b: self.b.share_b,
            c: self.c.share_b,
        };
        (first, second)
    }
}

fn product_shape(mode: TripleMode, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    match mode {
        TripleMode::Matmul if a[1] == b[0] => Ok([a[0], b[1]]),
        TripleMode::Hadamard if a == b => Ok(a),
        _ => Err(Error::TripleMismatch(format!(
            "{mode:?} with operands {} and {}",
            fmt_shape(a),
            fmt_shape(b)
        ))),
    }
}

fn multiply(mode: TripleMode, x: &ShareTensor, y: &ShareTensor) -> Result<ShareTensor> {
    match mode {
        TripleMode::Matmul => x.matmul(y),
        TripleMode::Hadamard => x.hadamard(y),
    }
}

/// Trusted-dealer triple generation. Ring triples use uniform `a, b`; float
/// triples use standard normal `a, b`.
pub fn gen_beaver_triple<R: RngCore + ?Sized>(
    shape_a: [usize; 2],
    shape_b: [usize; 2],
    mode: TripleMode,
    domain: &ShareDomain,
    rng: &mut R,
) -> Result<BeaverTriple> {
    product_shape(mode, shape_a, shape_b)?;
    let id = rng.next_u64();
    let (a, b) = match domain {
        ShareDomain::Float { .. } => {
            let mut normal = |[r, c]: [usize; 2]| {
                let data = (0..r * c).map(|_| StandardNormal.sample(rng)).collect();
                DenseTensor::from_vec(r, c, data).map(ShareTensor::Float)
            };
            (normal(shape_a)?, normal(shape_b)?)
        }
        ShareDomain::Ring(_) => (
            random_share(shape_a[0], shape_a[1], domain, rng)?,
            random_share(shape_b[0], shape_b[1], domain, rng)?,
        ),
    };
    let c = multiply(mode, &a, &b)?;
    Ok(BeaverTriple {
        id,
        mode,
        a: share_encoded(&a, domain, rng)?,
        b: share_encoded(&b, domain, rng)?,
        c: share_encoded(&c, domain, rng)?,
    })
}

/// Opened values `(x − a, y − b)` of one shared multiplication.
#[derive(Clone, Debug, PartialEq)]
pub struct Opening {
    pub triple_id: u64,
    pub e: ShareTensor,
    pub f: ShareTensor,
}

/// Per-process record of consumed triples and, optionally, opened values.
#[derive(Clone, Debug, Default)]
pub struct Transcript {
    record_values: bool,
    consumed: HashSet<u64>,
    openings: Vec<Opening>,
    opened_count: usize,
}

impl Transcript {
    /// Records every opened difference.
    pub fn recording() -> Self {
        Transcript {
            record_values: true,
            ..Default::default()
        }
    }

    /// Tracks triple use and counts openings without keeping the values.
    pub fn counting() -> Self {
        Transcript::default()
    }

    pub fn consume(&mut self, triple_id: u64) -> Result<()> {
        if !self.consumed.insert(triple_id) {
            return Err(Error::TripleReused(triple_id));
        }
        Ok(())
    }

    pub fn record(&mut self, triple_id: u64, e: &ShareTensor, f: &ShareTensor) {
        self.opened_count += 1;
        if self.record_values {
            self.openings.push(Opening {
                triple_id,
                e: e.clone(),
                f: f.clone(),
            });
        }
    }

    pub fn openings(&self) -> &[Opening] {
        &self.openings
    }

    pub fn opened_count(&self) -> usize {
        self.opened_count
    }

    pub fn consumed_count(&self) -> usize {
        self.consumed.len()
    }
}

/// First local step: a party masks its operand shares with its triple half.
pub fn open_local(x: &ShareTensor, y: &ShareTensor, half: &TripleHalf) -> Result<(ShareTensor, ShareTensor)> {
    let out = product_shape(half.mode, x.shape(), y.shape())?;
    if half.a.shape() != x.shape() || half.b.shape() != y.shape() || half.c.shape() != out {
        return Err(Error::TripleMismatch(format!(
            "triple {}x{} for operands {} and {}",
            fmt_shape(half.a.shape()),
            fmt_shape(half.b.shape()),
            fmt_shape(x.shape()),
            fmt_shape(y.shape())
        )));
    }
    Ok((x.sub(&half.a)?, y.sub(&half.b)?))
}

/// Second local step, after both masked differences are public:
/// `z_i = c_i + e·b_i + a_i·f (+ e·f on the first side)`, then local
/// truncation in the ring.
pub fn finish_local(
    side: Side,
    e: &ShareTensor,
    f: &ShareTensor,
    half: &TripleHalf,
    domain: &ShareDomain,
) -> Result<ShareTensor> {
    let mut z = half
        .c
        .add(&multiply(half.mode, e, &half.b)?)?
        .add(&multiply(half.mode, &half.a, f)?)?;
    if side == Side::First {
        z = z.add(&multiply(half.mode, e, f)?)?;
    }
    Ok(z.truncate(domain.ring_params(), side))
}

/// Shared multiplication of two sharings with a single-use triple. The
/// transcript receives the opened differences and rejects a reused triple.
pub fn multiply_shared(
    x: &SharePair,
    y: &SharePair,
    triple: BeaverTriple,
    transcript: &mut Transcript,
) -> Result<SharePair> {
    if !x.domain.compatible(&y.domain) || !x.domain.compatible(&triple.a.domain) {
        return Err(Error::DomainMismatch("multiply_shared"));
    }
    let domain = x.domain;
    transcript.consume(triple.id)?;
    let (first, second) = triple.split();
    let (e0, f0) = open_local(&x.share_a, &y.share_a, &first)?;
    let (e1, f1) = open_local(&x.share_b, &y.share_b, &second)?;
    let e = e0.add(&e1)?;
    let f = f0.add(&f1)?;
    transcript.record(first.id, &e, &f);
    let z0 = finish_local(Side::First, &e, &f, &first, &domain)?;
    let z1 = finish_local(Side::Second, &e, &f, &second, &domain)?;
    SharePair::new(z0, z1, domain)
}

/// Shared matrix product `x · w`.
pub fn matmul_shared(
    x: &SharePair,
    w: &SharePair,
    triple: BeaverTriple,
    transcript: &mut Transcript,
) -> Result<SharePair> {
    if triple.mode != TripleMode::Matmul {
        return Err(Error::TripleMismatch("matmul_shared needs a matmul triple".into()));
    }
    multiply_shared(x, w, triple, transcript)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::share::{reconstruct, share};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
        DenseTensor::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn triple_invariant_float_and_ring() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = gen_beaver_triple([2, 3], [3, 2], TripleMode::Matmul, &ShareDomain::default(), &mut rng).unwrap();
        let a = reconstruct(&t.a).unwrap();
        let b = reconstruct(&t.b).unwrap();
        let c = reconstruct(&t.c).unwrap();
        assert!(a.matmul(&b).unwrap().max_abs_diff(&c).unwrap() <= 1e-9);

        let ring = ShareDomain::ring(16, 64).unwrap();
        let t = gen_beaver_triple([2, 3], [3, 2], TripleMode::Matmul, &ring, &mut rng).unwrap();
        let a = t.a.reconstruct_raw().unwrap();
        let b = t.b.reconstruct_raw().unwrap();
        assert_eq!(a.matmul(&b).unwrap(), t.c.reconstruct_raw().unwrap());

        let t = gen_beaver_triple([1, 1], [1, 1], TripleMode::Hadamard, &ring, &mut rng).unwrap();
        let a = t.a.reconstruct_raw().unwrap();
        let b = t.b.reconstruct_raw().unwrap();
        assert_eq!(a.hadamard(&b).unwrap(), t.c.reconstruct_raw().unwrap());
    }

    #[test]
    fn triple_generation_is_deterministic() {
        let d = ShareDomain::ring(16, 64).unwrap();
        let t1 = gen_beaver_triple(
            [2, 2],
            [2, 2],
            TripleMode::Matmul,
            &d,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let t2 = gen_beaver_triple(
            [2, 2],
            [2, 2],
            TripleMode::Matmul,
            &d,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = ShareDomain::default();
        assert!(gen_beaver_triple([2, 3], [2, 3], TripleMode::Matmul, &d, &mut rng).is_err());
        assert!(gen_beaver_triple([2, 3], [3, 2], TripleMode::Hadamard, &d, &mut rng).is_err());

        let x = share(&DenseTensor::zeros(2, 3), &d, &mut rng).unwrap();
        let w = share(&DenseTensor::zeros(3, 4), &d, &mut rng).unwrap();
        let wrong = gen_beaver_triple([2, 3], [3, 2], TripleMode::Matmul, &d, &mut rng).unwrap();
        let mut tr = Transcript::recording();
        assert!(matches!(
            matmul_shared(&x, &w, wrong, &mut tr),
            Err(Error::TripleMismatch(_))
        ));
        let had = gen_beaver_triple([2, 3], [2, 3], TripleMode::Hadamard, &d, &mut rng).unwrap();
        assert!(matches!(
            matmul_shared(&x, &w, had, &mut tr),
            Err(Error::TripleMismatch(_))
        ));
    }

    #[test]
    fn identity_and_zero_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in [ShareDomain::default(), ShareDomain::ring(16, 64).unwrap()] {
            let x = random_matrix(3, 3, &mut rng);
            let sx = share(&x, &d, &mut rng).unwrap();
            let eye = share(&DenseTensor::identity(3), &d, &mut rng).unwrap();
            let t = gen_beaver_triple([3, 3], [3, 3], TripleMode::Matmul, &d, &mut rng).unwrap();
            let mut tr = Transcript::recording();
            let out = reconstruct(&matmul_shared(&sx, &eye, t, &mut tr).unwrap()).unwrap();
            assert!(out.max_abs_diff(&x).unwrap() <= 3.0 * 2f64.powi(-16));

            let zero = share(&DenseTensor::zeros(3, 3), &d, &mut rng).unwrap();
            let t = gen_beaver_triple([3, 3], [3, 3], TripleMode::Matmul, &d, &mut rng).unwrap();
            let out = reconstruct(&matmul_shared(&zero, &eye, t, &mut tr).unwrap()).unwrap();
            assert!(out.max_abs() <= 3.0 * 2f64.powi(-16));
            assert_eq!(tr.openings().len(), 2);
        }
    }

    #[test]
    fn float_matmul_matches_plaintext() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = ShareDomain::default();
        let mut tr = Transcript::counting();
        for _ in 0..1000 {
            let x = random_matrix(3, 4, &mut rng);
            let w = random_matrix(4, 2, &mut rng);
            let t = gen_beaver_triple([3, 4], [4, 2], TripleMode::Matmul, &d, &mut rng).unwrap();
            let z = matmul_shared(
                &share(&x, &d, &mut rng).unwrap(),
                &share(&w, &d, &mut rng).unwrap(),
                t,
                &mut tr,
            )
            .unwrap();
            let diff = reconstruct(&z).unwrap().max_abs_diff(&x.matmul(&w).unwrap()).unwrap();
            assert!(diff <= 1e-9, "diff {diff}");
        }
        assert_eq!(tr.opened_count(), 1000);
    }

    #[test]
    fn hadamard_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = ShareDomain::ring(16, 64).unwrap();
        let x = DenseTensor::row_vector(vec![1.5, -2.0, 0.25]);
        let y = DenseTensor::row_vector(vec![2.0, 3.0, -4.0]);
        let t = gen_beaver_triple([1, 3], [1, 3], TripleMode::Hadamard, &d, &mut rng).unwrap();
        let z = multiply_shared(
            &share(&x, &d, &mut rng).unwrap(),
            &share(&y, &d, &mut rng).unwrap(),
            t,
            &mut Transcript::counting(),
        )
        .unwrap();
        let got = reconstruct(&z).unwrap();
        let want = DenseTensor::row_vector(vec![3.0, -6.0, -1.0]);
        assert!(got.max_abs_diff(&want).unwrap() <= 2f64.powi(-15));
    }

    #[test]
    fn reused_triple_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = ShareDomain::default();
        let x = share(&DenseTensor::identity(2), &d, &mut rng).unwrap();
        let t = gen_beaver_triple([2, 2], [2, 2], TripleMode::Matmul, &d, &mut rng).unwrap();
        let mut tr = Transcript::counting();
        matmul_shared(&x, &x, t.clone(), &mut tr).unwrap();
        assert!(matches!(matmul_shared(&x, &x, t, &mut tr), Err(Error::TripleReused(_))));
    }
}

//! Newtype wrappers around the BLS12-381 groups.
//!
//! Signatures, blinded messages and OPRF values live in the 48-byte group
//! (`G1`); public keys live in the 96-byte group (`G2`). All scalar
//! multiplications route through [`G1Element::mul`] / [`G2Element::mul`] so
//! the per-thread exponentiation counter sees every group exponentiation
//! performed by a party.

use bls12_381::hash_to_curve::{ExpandMsgXmd, HashToCurve};
use bls12_381::{
    multi_miller_loop, G1Affine, G1Projective, G2Affine, G2Prepared, G2Projective,
};
use ff::Field;
use group::{Curve, Group};
use rand::RngCore;
use sha2::{Digest, Sha256};

/// Compressed size of a `G1` element.
pub const G1_BYTES: usize = 48;
/// Compressed size of a `G2` element.
pub const G2_BYTES: usize = 96;
/// Canonical big-endian size of a scalar.
pub const SCALAR_BYTES: usize = 32;

/// Per-thread count of expensive group operations: scalar multiplications
/// in `G1` or `G2`, and pairing evaluations. Thread-local so concurrent
/// test threads cannot perturb a measurement taken on a single-threaded
/// protocol run.
pub mod exp_count {
    use std::cell::Cell;

    thread_local! {
        static EXPS: Cell<u64> = const { Cell::new(0) };
    }

    /// Exponentiations performed by the current thread so far.
    pub fn read() -> u64 {
        EXPS.with(|c| c.get())
    }

    pub(crate) fn bump() {
        EXPS.with(|c| c.set(c.get() + 1));
    }
}

/// An integer modulo the prime group order.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Scalar(pub(crate) bls12_381::Scalar);

impl Scalar {
    pub fn zero() -> Self {
        Scalar(bls12_381::Scalar::zero())
    }

    pub fn one() -> Self {
        Scalar(bls12_381::Scalar::one())
    }

    pub fn from_u64(v: u64) -> Self {
        Scalar(bls12_381::Scalar::from(v))
    }

    pub fn is_zero(&self) -> bool {
        bool::from(self.0.is_zero())
    }

    /// Uniform scalar from 64 bytes (wide reduction mod the group order).
    pub fn from_wide_bytes(bytes: &[u8; 64]) -> Self {
        Scalar(bls12_381::Scalar::from_bytes_wide(bytes))
    }

    /// Deterministically derive a nonzero scalar from `seed` under a domain
    /// tag, re-hashing with an incremented counter in the (negligible) event
    /// the reduction lands on zero.
    pub fn derive(domain: &[u8], seed: &[u8]) -> Self {
        for counter in 0u32.. {
            let mut wide = [0u8; 64];
            let mut h = Sha256::new();
            h.update(b"dhp-scalar-derive");
            h.update((domain.len() as u32).to_be_bytes());
            h.update(domain);
            h.update(seed);
            h.update(counter.to_be_bytes());
            h.update([0u8]);
            wide[..32].copy_from_slice(&h.finalize_reset());
            h.update(b"dhp-scalar-derive");
            h.update((domain.len() as u32).to_be_bytes());
            h.update(domain);
            h.update(seed);
            h.update(counter.to_be_bytes());
            h.update([1u8]);
            wide[32..].copy_from_slice(&h.finalize());
            let s = Scalar::from_wide_bytes(&wide);
            if !s.is_zero() {
                return s;
            }
        }
        unreachable!("counter space exhausted");
    }

    /// Uniform nonzero scalar drawn from `rng`.
    pub fn random_nonzero(rng: &mut impl RngCore) -> Self {
        loop {
            let mut wide = [0u8; 64];
            rng.fill_bytes(&mut wide);
            let s = Scalar::from_wide_bytes(&wide);
            if !s.is_zero() {
                return s;
            }
        }
    }

    pub fn invert(&self) -> Option<Scalar> {
        Option::<bls12_381::Scalar>::from(self.0.invert()).map(Scalar)
    }

    pub fn neg(&self) -> Scalar {
        Scalar(-self.0)
    }

    /// Canonical 32-byte big-endian encoding.
    pub fn to_bytes_be(&self) -> [u8; SCALAR_BYTES] {
        let mut le = self.0.to_bytes();
        le.reverse();
        le
    }

    /// Decode the canonical big-endian form; `None` if not a reduced scalar.
    pub fn from_bytes_be(bytes: &[u8; SCALAR_BYTES]) -> Option<Scalar> {
        let mut le = *bytes;
        le.reverse();
        Option::<bls12_381::Scalar>::from(bls12_381::Scalar::from_bytes(&le)).map(Scalar)
    }
}

impl std::ops::Add for Scalar {
    type Output = Scalar;
    fn add(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Scalar {
    type Output = Scalar;
    fn sub(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 - rhs.0)
    }
}

impl std::ops::Mul for Scalar {
    type Output = Scalar;
    fn mul(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 * rhs.0)
    }
}

/// Element of the 48-byte source group.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct G1Element(pub(crate) G1Projective);

impl G1Element {
    pub fn generator() -> Self {
        G1Element(G1Projective::generator())
    }

    pub fn identity() -> Self {
        G1Element(G1Projective::identity())
    }

    pub fn is_identity(&self) -> bool {
        bool::from(self.0.is_identity())
    }

    /// Group exponentiation (counted).
    pub fn mul(&self, scalar: &Scalar) -> G1Element {
        exp_count::bump();
        G1Element(self.0 * scalar.0)
    }

    pub fn add(&self, other: &G1Element) -> G1Element {
        G1Element(self.0 + other.0)
    }

    /// Canonical compressed encoding (48 bytes).
    pub fn to_compressed(&self) -> [u8; G1_BYTES] {
        self.0.to_affine().to_compressed()
    }

    /// Decode a compressed element, rejecting off-curve and out-of-subgroup
    /// encodings.
    pub fn from_compressed(bytes: &[u8; G1_BYTES]) -> Option<G1Element> {
        Option::<G1Affine>::from(G1Affine::from_compressed(bytes))
            .map(|p| G1Element(G1Projective::from(p)))
    }

    /// Hash arbitrary bytes to the group under the standard
    /// SSWU/expand-message suite for this curve. Never the identity.
    pub fn hash_to_curve(domain: &[u8], msg: &[u8]) -> G1Element {
        let p = <G1Projective as HashToCurve<ExpandMsgXmd<Sha256>>>::hash_to_curve(msg, domain);
        G1Element(p)
    }
}

/// Element of the 96-byte source group.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct G2Element(pub(crate) G2Projective);

impl G2Element {
    pub fn generator() -> Self {
        G2Element(G2Projective::generator())
    }

    pub fn identity() -> Self {
        G2Element(G2Projective::identity())
    }

    pub fn is_identity(&self) -> bool {
        bool::from(self.0.is_identity())
    }

    /// Group exponentiation (counted).
    pub fn mul(&self, scalar: &Scalar) -> G2Element {
        exp_count::bump();
        G2Element(self.0 * scalar.0)
    }

    pub fn add(&self, other: &G2Element) -> G2Element {
        G2Element(self.0 + other.0)
    }

    /// Canonical compressed encoding (96 bytes).
    pub fn to_compressed(&self) -> [u8; G2_BYTES] {
        self.0.to_affine().to_compressed()
    }

    pub fn from_compressed(bytes: &[u8; G2_BYTES]) -> Option<G2Element> {
        Option::<G2Affine>::from(G2Affine::from_compressed(bytes))
            .map(|p| G2Element(G2Projective::from(p)))
    }
}

/// `e(a1, a2) == e(b1, b2)`, evaluated as a single double Miller loop.
/// Counts as two exponentiations: each pairing evaluation is comparable
/// work, and a verifier that only ever pairs would otherwise meter as
/// free.
pub fn pairing_eq(a1: &G1Element, a2: &G2Element, b1: &G1Element, b2: &G2Element) -> bool {
    exp_count::bump();
    exp_count::bump();
    let a1 = a1.0.to_affine();
    let b1 = b1.0.to_affine();
    let a2 = G2Prepared::from((-a2.0).to_affine());
    let b2 = G2Prepared::from(b2.0.to_affine());
    let gt = multi_miller_loop(&[(&a1, &a2), (&b1, &b2)]).final_exponentiation();
    bool::from(gt.is_identity())
}

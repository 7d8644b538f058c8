//! Short signatures on BLS12-381 with additive key sharing and message
//! blinding.
//!
//! A signature on `m` is `H(m)^sk` where `H` hashes into the 48-byte group;
//! verification is one pairing equation against the public key `g2^sk`.
//! Splitting `sk` additively across servers makes signing distributed: each
//! server raises the (possibly blinded) message point to its own share and
//! the client multiplies the partial results. Signing is deterministic, so
//! the combined-then-unblinded value is byte-for-byte the signature the
//! summed key would have produced on its own. The servers only ever see
//! `H(m)^r` for a fresh client secret `r`, which is what keeps a signing
//! session unlinkable to the signature it produced.
//!
//! Key generation, blinding and refresh all derive their randomness from
//! caller-supplied 32-byte entropy, so a seeded caller gets reproducible
//! runs and a production caller passes OS entropy.

use thiserror::Error;

use crate::group::{pairing_eq, G1Element, G2Element, Scalar};

/// Domain tag for hashing messages onto the curve, per the standard
/// signature ciphersuite for this curve.
pub const HASH_DST: &[u8] = b"BLS_SIG_BLS12381G1_XMD:SHA-256_SSWU_RO_NUL_";

pub const ENTROPY_BYTES: usize = 32;

/// Secret half of a plain (non-distributed) keypair.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SecretKey(pub Scalar);

/// Public verification key in the 96-byte group.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PublicKey(pub G2Element);

/// A signature, plain or combined-from-partials.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Signature(pub G1Element);

/// One server's additive share of a policy signing key.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SigningKeyShare {
    /// 1-based server index.
    pub index: usize,
    /// Bumped by one on every completed refresh.
    pub epoch: u64,
    pub policy_label: String,
    pub share: Scalar,
}

impl SigningKeyShare {
    /// This share's public contribution to the combined key.
    pub fn contribution(&self) -> PublicKey {
        PublicKey(G2Element::generator().mul(&self.share))
    }

    /// Fold in the refresh deltas addressed to this server and advance the
    /// epoch. Callers pass component `index` of every server's delta
    /// vector; the vectors each sum to zero, so the combined key stands.
    pub fn apply_refresh(&mut self, received: impl IntoIterator<Item = Scalar>) {
        for d in received {
            self.share = self.share + d;
        }
        self.epoch += 1;
    }
}

/// Public key of the summed shares, tagged with the policy it signs for.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct VerificationKey {
    pub policy_label: String,
    pub element: G2Element,
}

/// One server's contribution to a distributed signature.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PartialSignature {
    pub index: usize,
    pub epoch: u64,
    pub element: G1Element,
}

/// A message point raised to a client-held blinding exponent.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct BlindedMessage(pub G1Element);

/// Client-side state needed to strip the blinding from a signature.
#[derive(Clone)]
pub struct BlindingTrapdoor {
    blinder: Scalar,
    message: Vec<u8>,
}

impl BlindingTrapdoor {
    pub fn message(&self) -> &[u8] {
        &self.message
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DsigError {
    #[error("target point is the group identity")]
    IdentityTarget,
    #[error("no partial signatures supplied")]
    NoPartials,
    #[error("duplicate partial for index {0}")]
    DuplicateIndex(usize),
    #[error("missing partial for index {0}")]
    MissingIndex(usize),
    #[error("partial for index {0} outside the server set")]
    UnknownIndex(usize),
    #[error("partials span more than one key epoch")]
    MixedEpochs,
    #[error("share refresh needs at least two servers")]
    TooFewServers,
}

/// Hash a message onto the signature group. Total and deterministic; the
/// suite guarantees the output is never the identity.
pub fn hash_to_group(message: &[u8]) -> G1Element {
    G1Element::hash_to_curve(HASH_DST, message)
}

/// Keypair derived deterministically from 32 bytes of entropy: same seed,
/// same pair. The derivation rehashes with a counter until the scalar is
/// nonzero.
pub fn sig_kgen(seed: &[u8; ENTROPY_BYTES]) -> (SecretKey, PublicKey) {
    let sk = Scalar::derive(b"dhp-sig-kgen", seed);
    (SecretKey(sk), PublicKey(G2Element::generator().mul(&sk)))
}

/// `H(m)^sk`. Deterministic: identical inputs give identical bytes.
pub fn sig_sign(sk: &SecretKey, message: &[u8]) -> Signature {
    Signature(hash_to_group(message).mul(&sk.0))
}

/// Check `e(sig, g2) == e(H(m), pk)`. Total: any decodable inputs yield
/// accept or reject, never a panic. The identity public key is rejected
/// outright since no honest keypair produces it.
pub fn sig_vf(pk: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    if pk.0.is_identity() {
        return false;
    }
    pairing_eq(&sig.0, &G2Element::generator(), &hash_to_group(message), &pk.0)
}

/// Dealerless distributed keygen: share `i` comes from `seeds[i]` alone,
/// the combined public key is the product of the per-share contributions.
/// All shares start at epoch 0.
pub fn dsig_kgen(
    policy_label: &str,
    seeds: &[[u8; ENTROPY_BYTES]],
) -> (Vec<SigningKeyShare>, VerificationKey) {
    assert!(!seeds.is_empty(), "need at least one share");
    let shares: Vec<SigningKeyShare> = seeds
        .iter()
        .enumerate()
        .map(|(i, seed)| SigningKeyShare {
            index: i + 1,
            epoch: 0,
            policy_label: policy_label.to_string(),
            share: Scalar::derive(b"dhp-dsig-kgen", seed),
        })
        .collect();
    let vk = aggregate_verification_key(policy_label, shares.iter().map(|s| s.contribution()));
    (shares, vk)
}

/// Combine per-share public contributions into the verification key.
pub fn aggregate_verification_key(
    policy_label: &str,
    contributions: impl IntoIterator<Item = PublicKey>,
) -> VerificationKey {
    let mut acc = G2Element::identity();
    for pk in contributions {
        acc = acc.add(&pk.0);
    }
    VerificationKey { policy_label: policy_label.to_string(), element: acc }
}

/// Raise the target point (a hashed message, or a blinded one) to this
/// server's share. Refuses the identity target, which would let anyone
/// assemble a "signature" out of nothing.
pub fn dsig_sign(
    share: &SigningKeyShare,
    target: &G1Element,
) -> Result<PartialSignature, DsigError> {
    if target.is_identity() {
        return Err(DsigError::IdentityTarget);
    }
    Ok(PartialSignature {
        index: share.index,
        epoch: share.epoch,
        element: target.mul(&share.share),
    })
}

/// Multiply partials into the combined signature. The caller states how
/// many servers it dealt with; exactly one partial per index 1..n must be
/// present, all from a single epoch. A mixed epoch means a refresh landed
/// mid-session and the session must restart.
pub fn dsig_comb(n: usize, partials: &[PartialSignature]) -> Result<Signature, DsigError> {
    if partials.is_empty() || n == 0 {
        return Err(DsigError::NoPartials);
    }
    let epoch = partials[0].epoch;
    let mut seen = vec![false; n];
    let mut acc = G1Element::identity();
    for p in partials {
        if p.epoch != epoch {
            return Err(DsigError::MixedEpochs);
        }
        if p.index == 0 || p.index > n {
            return Err(DsigError::UnknownIndex(p.index));
        }
        if seen[p.index - 1] {
            return Err(DsigError::DuplicateIndex(p.index));
        }
        seen[p.index - 1] = true;
        acc = acc.add(&p.element);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(DsigError::MissingIndex(missing + 1));
    }
    Ok(Signature(acc))
}

/// Verification does not care whether the key was ever shared.
pub fn dsig_vf(vk: &VerificationKey, message: &[u8], sig: &Signature) -> bool {
    sig_vf(&PublicKey(vk.element), message, sig)
}

/// Blind `m` for distributed signing: derive a nonzero `r` from the
/// entropy, send `H(m)^r`, keep `(r, m)` to unblind.
pub fn dsig_blind(
    message: &[u8],
    entropy: &[u8; ENTROPY_BYTES],
) -> (BlindedMessage, BlindingTrapdoor) {
    dsig_blind_with(message, Scalar::derive(b"dhp-dsig-blind", entropy))
}

/// Blinding with a caller-chosen exponent. Exists so adversarial tests can
/// run the identical flow with `r = 1` (no blinding at all) as a contrast
/// case.
pub fn dsig_blind_with(message: &[u8], r: Scalar) -> (BlindedMessage, BlindingTrapdoor) {
    assert!(!r.is_zero(), "blinding exponent must be nonzero");
    let blinded = BlindedMessage(hash_to_group(message).mul(&r));
    (blinded, BlindingTrapdoor { blinder: r, message: message.to_vec() })
}

/// Strip the blinding: `(H(m)^r)^sk` raised to `r^-1` is `H(m)^sk`.
pub fn dsig_unblind(blinded_sig: &Signature, trapdoor: &BlindingTrapdoor) -> Signature {
    let r_inv = trapdoor.blinder.invert().expect("trapdoor blinder is nonzero");
    Signature(blinded_sig.0.mul(&r_inv))
}

/// A zero-sum delta vector for proactive share refresh, derived from the
/// broadcasting server's entropy. Every server draws one of these and
/// broadcasts it; server `i` then adds component `i` of every vector to
/// its share. Individual shares re-randomize while the sum, and therefore
/// the public key, is untouched. Pointless for a single server, hence the
/// n ≥ 2 requirement.
pub fn dsig_refresh_deltas(
    n: usize,
    entropy: &[u8; ENTROPY_BYTES],
) -> Result<Vec<Scalar>, DsigError> {
    if n < 2 {
        return Err(DsigError::TooFewServers);
    }
    let mut deltas = Vec::with_capacity(n);
    let mut sum = Scalar::zero();
    for i in 0..n - 1 {
        let mut seed = Vec::with_capacity(ENTROPY_BYTES + 8);
        seed.extend_from_slice(entropy);
        seed.extend_from_slice(&(i as u64).to_be_bytes());
        let d = Scalar::derive(b"dhp-refresh-delta", &seed);
        sum = sum + d;
        deltas.push(d);
    }
    deltas.push(sum.neg());
    Ok(deltas)
}

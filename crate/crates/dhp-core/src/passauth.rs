//! Password-derived client key material via a distributed oblivious PRF.
//!
//! The client hashes `(uid, password)` onto the curve, blinds the point
//! with a fresh exponent ρ and sends it to every server. Each server
//! raises it to its own PRF key share; the client multiplies the replies,
//! strips ρ and hashes the result into a 32-byte seed. The seed is a
//! deterministic function of `(uid, password, Σ key shares)` and nothing
//! else, so the same credentials always regenerate the same client signing
//! key, while the servers only ever see one-time blinded points. Key
//! shares combine additively in the exponent, so the zero-sum refresh used
//! for signing shares applies here unchanged.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::blindsig::{sig_kgen, PublicKey, SecretKey, ENTROPY_BYTES};
use crate::canonical::TupleEncoder;
use crate::group::{G1Element, Scalar};

/// Tag under which credentials are hashed onto the curve.
const INPUT_TAG: &str = "pesto-oprf";
/// Tag under which the unblinded PRF output is hashed into the seed.
const SEED_TAG: &str = "pesto-seed";

pub const SEED_BYTES: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PassauthError {
    #[error("blinded input is the group identity")]
    IdentityInput,
    #[error("no evaluations supplied")]
    NoEvaluations,
    #[error("duplicate evaluation for index {0}")]
    DuplicateIndex(usize),
    #[error("missing evaluation for index {0}")]
    MissingIndex(usize),
    #[error("evaluation for index {0} outside the server set")]
    UnknownIndex(usize),
}

/// One server's additive share of the PRF key.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct OprfKeyShare {
    /// Moves in lockstep with the signing-share epoch during refresh.
    pub epoch: u64,
    pub share: Scalar,
}

impl OprfKeyShare {
    /// Fold in refresh deltas addressed to this server, as for signing
    /// shares.
    pub fn apply_refresh(&mut self, received: impl IntoIterator<Item = Scalar>) {
        for d in received {
            self.share = self.share + d;
        }
        self.epoch += 1;
    }
}

/// Client-side result of blinding: the point α that travels to the
/// servers plus the exponent ρ that never leaves the client.
#[derive(Clone)]
pub struct PasswordBlind {
    pub element: G1Element,
    blinder: Scalar,
}

/// One server's reply: α raised to its key share.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct OprfEvaluation {
    pub index: usize,
    pub element: G1Element,
}

/// The 32-byte value everything client-side is derived from.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DerivedSeed(pub [u8; SEED_BYTES]);

/// The curve point encoding a credential pair, before blinding.
pub fn credential_point(uid: &str, password: &str) -> G1Element {
    let encoded = TupleEncoder::new()
        .push_str(INPUT_TAG)
        .push_str(uid)
        .push_str(password)
        .finish();
    crate::blindsig::hash_to_group(&encoded)
}

/// Blind the credential point under an exponent derived from the entropy.
pub fn oprf_blind(uid: &str, password: &str, entropy: &[u8; ENTROPY_BYTES]) -> PasswordBlind {
    oprf_blind_with(uid, password, Scalar::derive(b"dhp-oprf-blind", entropy))
}

/// Blinding with a caller-chosen exponent, for tests that need to replay
/// the flow under a known or degenerate ρ.
pub fn oprf_blind_with(uid: &str, password: &str, rho: Scalar) -> PasswordBlind {
    assert!(!rho.is_zero(), "blinding exponent must be nonzero");
    PasswordBlind { element: credential_point(uid, password).mul(&rho), blinder: rho }
}

/// Server side: raise the blinded point to the key share. The identity
/// point is refused; it would evaluate to itself under any key and lets a
/// client probe for nothing.
pub fn oprf_eval(
    key: &OprfKeyShare,
    index: usize,
    alpha: &G1Element,
) -> Result<OprfEvaluation, PassauthError> {
    if alpha.is_identity() {
        return Err(PassauthError::IdentityInput);
    }
    Ok(OprfEvaluation { index, element: alpha.mul(&key.share) })
}

/// Combine one reply per server, unblind and hash into the seed. The
/// blinder cancels exactly, so the result depends only on the credentials
/// and the combined server key.
pub fn oprf_finalize(
    n: usize,
    evals: &[OprfEvaluation],
    blind: &PasswordBlind,
    uid: &str,
    password: &str,
) -> Result<DerivedSeed, PassauthError> {
    if evals.is_empty() || n == 0 {
        return Err(PassauthError::NoEvaluations);
    }
    let mut seen = vec![false; n];
    let mut acc = G1Element::identity();
    for e in evals {
        if e.index == 0 || e.index > n {
            return Err(PassauthError::UnknownIndex(e.index));
        }
        if seen[e.index - 1] {
            return Err(PassauthError::DuplicateIndex(e.index));
        }
        seen[e.index - 1] = true;
        acc = acc.add(&e.element);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(PassauthError::MissingIndex(missing + 1));
    }
    let rho_inv = blind.blinder.invert().expect("blinder is nonzero");
    let unblinded = acc.mul(&rho_inv);
    let encoded = TupleEncoder::new()
        .push_str(SEED_TAG)
        .push_str(uid)
        .push_str(password)
        .push(&unblinded.to_compressed())
        .finish();
    Ok(DerivedSeed(Sha256::digest(&encoded).into()))
}

/// The client signing keypair is a pure function of the seed: losing the
/// device loses nothing, re-running the PRF regenerates the same key.
pub fn derive_client_keypair(seed: &DerivedSeed) -> (SecretKey, PublicKey) {
    sig_kgen(&seed.0)
}

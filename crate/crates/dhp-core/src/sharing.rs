//! XOR secret sharing of health records across all servers.
//!
//! An (n,n) scheme: shares 1..n-1 are uniform random and share n is the
//! record XORed with all of them, so any proper subset is jointly
//! independent of the record. Each stored share travels with a digest of
//! the plaintext; reconstruction re-hashes and refuses to return bytes
//! that do not match, which turns a corrupted or substituted share into a
//! hard error instead of silent garbage.

use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DIGEST_BYTES: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SharingError {
    #[error("no shares supplied")]
    NoShares,
    #[error("share lengths disagree")]
    LengthMismatch,
    #[error("duplicate share for index {0}")]
    DuplicateIndex(usize),
    #[error("missing share for index {0}")]
    MissingIndex(usize),
    #[error("share for index {0} outside the server set")]
    UnknownIndex(usize),
    #[error("share records carry different record digests")]
    DigestDisagreement,
    #[error("reconstructed record does not match its digest")]
    IntegrityFailure,
}

/// One server's share of a record.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Share {
    /// 1-based server index.
    pub index: usize,
    pub bytes: Vec<u8>,
}

/// One server's at-rest entry: the share plus the digest of the plaintext,
/// identical across all servers for one record.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ShareRecord {
    pub digest: [u8; DIGEST_BYTES],
    pub share: Share,
}

/// SHA-256 of the plaintext record.
pub fn secret_digest(record: &[u8]) -> [u8; DIGEST_BYTES] {
    Sha256::digest(record).into()
}

/// A uniform random share of the given length.
pub fn random_share(len: usize, rng: &mut impl RngCore) -> Vec<u8> {
    let mut share = vec![0u8; len];
    rng.fill_bytes(&mut share);
    share
}

/// The closing share: the record XORed with every other share. With zero
/// other shares this is the record itself, the degenerate n = 1 case.
pub fn final_share(record: &[u8], others: &[Vec<u8>]) -> Result<Vec<u8>, SharingError> {
    let mut out = record.to_vec();
    for share in others {
        if share.len() != out.len() {
            return Err(SharingError::LengthMismatch);
        }
        for (o, s) in out.iter_mut().zip(share) {
            *o ^= s;
        }
    }
    Ok(out)
}

/// Split a record into n indexed shares. Shares 1..n-1 are drawn from the
/// entropy source before the record is consulted.
pub fn xor_share(record: &[u8], n: usize, rng: &mut impl RngCore) -> Vec<Share> {
    assert!(n >= 1, "need at least one share");
    let randoms: Vec<Vec<u8>> = (0..n - 1).map(|_| random_share(record.len(), rng)).collect();
    let last = final_share(record, &randoms).expect("fresh shares have equal length");
    let mut shares: Vec<Share> = randoms
        .into_iter()
        .enumerate()
        .map(|(i, bytes)| Share { index: i + 1, bytes })
        .collect();
    shares.push(Share { index: n, bytes: last });
    shares
}

/// XOR all shares back together. Order-insensitive, but every index 1..n
/// must appear exactly once and lengths must agree. Unguarded; use
/// [`guarded_reconstruct`] when the shares come from storage.
pub fn xor_reconstruct(n: usize, shares: &[Share]) -> Result<Vec<u8>, SharingError> {
    let first = shares.first().ok_or(SharingError::NoShares)?;
    if n == 0 {
        return Err(SharingError::NoShares);
    }
    let mut seen = vec![false; n];
    let mut out = vec![0u8; first.bytes.len()];
    for share in shares {
        if share.bytes.len() != out.len() {
            return Err(SharingError::LengthMismatch);
        }
        if share.index == 0 || share.index > n {
            return Err(SharingError::UnknownIndex(share.index));
        }
        if seen[share.index - 1] {
            return Err(SharingError::DuplicateIndex(share.index));
        }
        seen[share.index - 1] = true;
        for (o, s) in out.iter_mut().zip(&share.bytes) {
            *o ^= s;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(SharingError::MissingIndex(missing + 1));
    }
    Ok(out)
}

/// Reconstruct from stored records, requiring that all digests agree and
/// that the reconstructed bytes hash back to that digest. An integrity
/// failure means some server returned bytes it was not storing.
pub fn guarded_reconstruct(n: usize, records: &[ShareRecord]) -> Result<Vec<u8>, SharingError> {
    let first = records.first().ok_or(SharingError::NoShares)?;
    if records.iter().any(|r| r.digest != first.digest) {
        return Err(SharingError::DigestDisagreement);
    }
    let shares: Vec<Share> = records.iter().map(|r| r.share.clone()).collect();
    let record = xor_reconstruct(n, &shares)?;
    if secret_digest(&record) != first.digest {
        return Err(SharingError::IntegrityFailure);
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn with_digests(record: &[u8], shares: Vec<Share>) -> Vec<ShareRecord> {
        let digest = secret_digest(record);
        shares.into_iter().map(|share| ShareRecord { digest, share }).collect()
    }

    #[test]
    fn digest_matches_published_sha256_vectors() {
        assert_eq!(
            hex::encode(secret_digest(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            hex::encode(secret_digest(b"")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn digest_changes_on_any_bit_flip() {
        let record = b"dose=2;brand=mrna".to_vec();
        let base = secret_digest(&record);
        for bit in 0..record.len() * 8 {
            let mut flipped = record.clone();
            flipped[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(secret_digest(&flipped), base);
        }
    }

    #[test]
    fn share_reconstruct_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let record = b"vaccination: 2 doses, last 2026-01-03";
        for n in 1..=5 {
            let shares = xor_share(record, n, &mut rng);
            assert_eq!(shares.len(), n);
            assert_eq!(xor_reconstruct(n, &shares).unwrap(), record);
        }
    }

    #[test]
    fn random_64_byte_record_recombines_by_hand() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let record = random_share(64, &mut rng);
        let shares = xor_share(&record, 3, &mut rng);
        let mut manual = vec![0u8; 64];
        for share in &shares {
            for (m, s) in manual.iter_mut().zip(&share.bytes) {
                *m ^= s;
            }
        }
        assert_eq!(manual, record);
    }

    #[test]
    fn single_share_is_the_record() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let shares = xor_share(b"h", 1, &mut rng);
        assert_eq!(shares, vec![Share { index: 1, bytes: b"h".to_vec() }]);
    }

    #[test]
    fn zero_record_makes_both_halves_equal() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let shares = xor_share(&[0u8; 16], 2, &mut rng);
        assert_eq!(shares[0].bytes, shares[1].bytes);
    }

    #[test]
    fn xor_arithmetic_spot_check() {
        let shares = vec![
            Share { index: 1, bytes: vec![0xFF] },
            Share { index: 2, bytes: vec![0x0F] },
        ];
        assert_eq!(xor_reconstruct(2, &shares).unwrap(), vec![0xF0]);
    }

    #[test]
    fn order_does_not_matter() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let record = b"record".to_vec();
        let mut shares = xor_share(&record, 4, &mut rng);
        shares.reverse();
        shares.swap(0, 2);
        assert_eq!(xor_reconstruct(4, &shares).unwrap(), record);
    }

    #[test]
    fn index_coverage_is_enforced() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let shares = xor_share(b"record", 3, &mut rng);
        assert_eq!(xor_reconstruct(3, &[]), Err(SharingError::NoShares));
        assert_eq!(
            xor_reconstruct(3, &shares[..2]),
            Err(SharingError::MissingIndex(3))
        );
        let dup = vec![shares[0].clone(), shares[0].clone()];
        assert_eq!(xor_reconstruct(3, &dup), Err(SharingError::DuplicateIndex(1)));
        let unequal = vec![
            Share { index: 1, bytes: vec![0u8; 4] },
            Share { index: 2, bytes: vec![0u8; 5] },
        ];
        assert_eq!(xor_reconstruct(2, &unequal), Err(SharingError::LengthMismatch));
    }

    #[test]
    fn guarded_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let record = b"test result: negative".to_vec();
        let records = with_digests(&record, xor_share(&record, 3, &mut rng));
        assert_eq!(guarded_reconstruct(3, &records).unwrap(), record);
    }

    #[test]
    fn every_single_byte_corruption_is_caught() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let record = b"dose=2".to_vec();
        let records = with_digests(&record, xor_share(&record, 3, &mut rng));
        for i in 0..records.len() {
            for pos in 0..records[i].share.bytes.len() {
                for bit in 0..8 {
                    let mut bad = records.clone();
                    bad[i].share.bytes[pos] ^= 1 << bit;
                    assert_eq!(
                        guarded_reconstruct(3, &bad),
                        Err(SharingError::IntegrityFailure),
                        "corruption at share {i} byte {pos} bit {bit} slipped through"
                    );
                }
            }
        }
    }

    #[test]
    fn digest_disagreement_is_caught_before_reconstruction() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let record = b"r".to_vec();
        let mut records = with_digests(&record, xor_share(&record, 2, &mut rng));
        records[1].digest[0] ^= 1;
        assert_eq!(guarded_reconstruct(2, &records), Err(SharingError::DigestDisagreement));
        assert_eq!(guarded_reconstruct(2, &[]), Err(SharingError::NoShares));
    }

    #[test]
    fn leading_shares_are_independent_of_the_record() {
        // Same entropy stream, two different records: shares 1..n-1 are
        // drawn before the record is consulted, so they match exactly.
        let record_a = b"status: vaccinated".to_vec();
        let record_b = b"status: unvaccinat".to_vec();
        let mut rng_a = ChaCha20Rng::seed_from_u64(10);
        let mut rng_b = ChaCha20Rng::seed_from_u64(10);
        let shares_a = xor_share(&record_a, 4, &mut rng_a);
        let shares_b = xor_share(&record_b, 4, &mut rng_b);
        assert_eq!(&shares_a[..3], &shares_b[..3]);
        assert_ne!(shares_a[3], shares_b[3]);
    }
}

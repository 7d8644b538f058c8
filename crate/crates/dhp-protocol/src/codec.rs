//! Byte-to-group decoding shared by every role. All failures surface as
//! `BadRequest`: a message that does not parse into valid group elements
//! is malformed no matter who sent it.

use dhp_core::blindsig::{PublicKey, Signature};
use dhp_core::group::{G1Element, G2Element, Scalar};

use crate::message::ProtocolError;

pub fn g1_from(bytes: &[u8], what: &str) -> Result<G1Element, ProtocolError> {
    let arr: [u8; 48] = bytes
        .try_into()
        .map_err(|_| ProtocolError::BadRequest(format!("{what}: wrong length")))?;
    G1Element::from_compressed(&arr)
        .ok_or_else(|| ProtocolError::BadRequest(format!("{what}: not a curve point")))
}

pub fn g2_from(bytes: &[u8], what: &str) -> Result<G2Element, ProtocolError> {
    let arr: [u8; 96] = bytes
        .try_into()
        .map_err(|_| ProtocolError::BadRequest(format!("{what}: wrong length")))?;
    G2Element::from_compressed(&arr)
        .ok_or_else(|| ProtocolError::BadRequest(format!("{what}: not a curve point")))
}

pub fn pk_from(bytes: &[u8], what: &str) -> Result<PublicKey, ProtocolError> {
    g2_from(bytes, what).map(PublicKey)
}

pub fn sig_from(bytes: &[u8], what: &str) -> Result<Signature, ProtocolError> {
    g1_from(bytes, what).map(Signature)
}

pub fn scalar_from(bytes: &[u8], what: &str) -> Result<Scalar, ProtocolError> {
    let arr: [u8; 32] = bytes
        .try_into()
        .map_err(|_| ProtocolError::BadRequest(format!("{what}: wrong length")))?;
    Scalar::from_bytes_be(&arr)
        .ok_or_else(|| ProtocolError::BadRequest(format!("{what}: not a scalar")))
}

pub fn digest_from(bytes: &[u8]) -> Result<[u8; 32], ProtocolError> {
    bytes
        .try_into()
        .map_err(|_| ProtocolError::Integrity("digest: wrong length".into()))
}

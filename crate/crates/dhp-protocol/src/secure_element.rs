//! Software stand-in for a secure element: a keystore whose interface
//! exposes generate, sign, and get-public, and nothing else. The secret
//! scalar lives in the element's own file and never crosses the API, so
//! protocol code cannot leak what it cannot reach.

use std::path::Path;
use std::sync::Mutex;

use dhp_core::blindsig::{sig_kgen, PublicKey, SecretKey, Signature};
use dhp_core::group::G2Element;
use thiserror::Error;

use crate::store::Store;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SeError {
    #[error("no key with id {0}")]
    UnknownKey(String),
    #[error("secure element storage: {0}")]
    Storage(String),
}

/// Opaque handle name for one keypair inside the element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyId(pub String);

pub struct SecureElement {
    store: Mutex<Store>,
}

impl SecureElement {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<SecureElement> {
        Ok(SecureElement { store: Mutex::new(Store::open(path)?) })
    }

    /// Create a fresh keypair inside the element. Only the public half
    /// comes back.
    pub fn generate(&self, entropy: [u8; 32]) -> Result<(KeyId, PublicKey), SeError> {
        let (sk, pk) = sig_kgen(&entropy);
        // Key id from the public half: stable, collision-free, secret-free.
        let id = hex::encode(&pk.0.to_compressed()[..8]);
        let mut store = self.store.lock().expect("se lock");
        store
            .set_bytes(&format!("key.{id}.sk"), &sk.0.to_bytes_be())
            .map_err(|e| SeError::Storage(e.to_string()))?;
        store
            .set_bytes(&format!("key.{id}.pk"), &pk.0.to_compressed())
            .map_err(|e| SeError::Storage(e.to_string()))?;
        Ok((KeyId(id), pk))
    }

    fn secret(&self, key: &KeyId) -> Result<SecretKey, SeError> {
        let store = self.store.lock().expect("se lock");
        let bytes = store
            .get_bytes(&format!("key.{}.sk", key.0))
            .filter(|b| !b.is_empty())
            .ok_or_else(|| SeError::UnknownKey(key.0.clone()))?;
        let mut arr = [0u8; 32];
        if bytes.len() != 32 {
            return Err(SeError::Storage("corrupt key material".into()));
        }
        arr.copy_from_slice(&bytes);
        let scalar = dhp_core::group::Scalar::from_bytes_be(&arr)
            .ok_or_else(|| SeError::Storage("corrupt key material".into()))?;
        Ok(SecretKey(scalar))
    }

    pub fn sign(&self, key: &KeyId, message: &[u8]) -> Result<Signature, SeError> {
        let sk = self.secret(key)?;
        Ok(dhp_core::blindsig::sig_sign(&sk, message))
    }

    pub fn public(&self, key: &KeyId) -> Result<PublicKey, SeError> {
        let store = self.store.lock().expect("se lock");
        let bytes = store
            .get_bytes(&format!("key.{}.pk", key.0))
            .filter(|b| !b.is_empty())
            .ok_or_else(|| SeError::UnknownKey(key.0.clone()))?;
        let arr: [u8; 96] = bytes
            .try_into()
            .map_err(|_| SeError::Storage("corrupt key material".into()))?;
        let point = G2Element::from_compressed(&arr)
            .ok_or_else(|| SeError::Storage("corrupt key material".into()))?;
        Ok(PublicKey(point))
    }

    /// Wipe a key, as a real element would on factory reset. Used to model
    /// the lost-second-factor case.
    pub fn remove(&self, key: &KeyId) -> Result<(), SeError> {
        let mut store = self.store.lock().expect("se lock");
        for suffix in ["sk", "pk"] {
            store
                .set(&format!("key.{}.{suffix}", key.0), "")
                .map_err(|e| SeError::Storage(e.to_string()))?;
        }
        Ok(())
    }
}

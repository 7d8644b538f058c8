//! The health authority: the one party allowed to feed records into the
//! servers. It signs every record it pushes and drives the two-phase
//! ingestion so that either every server ends up holding a share or none
//! keeps anything.

use std::path::Path;
use std::sync::{Arc, Mutex};

use dhp_core::blindsig::{sig_kgen, sig_sign, PublicKey, SecretKey};
use dhp_core::group::Scalar;

use crate::health::HealthRecord;
use crate::message::{
    health_binding, msg, Ack, Bytes, Envelope, IngestPushReq, IngestUidReq, ProtocolError,
};
use crate::store::Store;
use crate::transport::Endpoint;

pub struct HealthAuthority {
    sk: SecretKey,
    pk: PublicKey,
    store: Option<Mutex<Store>>,
    push_seq: Mutex<u64>,
}

fn store_err(e: std::io::Error) -> ProtocolError {
    ProtocolError::Transport(format!("authority storage: {e}"))
}

impl HealthAuthority {
    pub fn new(entropy: [u8; 32]) -> HealthAuthority {
        let (sk, pk) = sig_kgen(&entropy);
        HealthAuthority { sk, pk, store: None, push_seq: Mutex::new(0) }
    }

    pub fn bootstrap(path: impl AsRef<Path>, entropy: [u8; 32]) -> std::io::Result<HealthAuthority> {
        let mut authority = HealthAuthority::new(entropy);
        let mut store = Store::open(path)?;
        store.set_bytes("authority.sk", &authority.sk.0.to_bytes_be())?;
        store.set_bytes("authority.pk", &authority.pk.0.to_compressed())?;
        store.set("authority.seq", "0")?;
        authority.store = Some(Mutex::new(store));
        Ok(authority)
    }

    pub fn reopen(path: impl AsRef<Path>) -> std::io::Result<HealthAuthority> {
        let store = Store::open(path)?;
        let invalid = |what: &str| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("authority file: {what}"))
        };
        let sk_bytes = store.get_bytes("authority.sk").ok_or_else(|| invalid("missing key"))?;
        let sk_arr: [u8; 32] = sk_bytes.try_into().map_err(|_| invalid("bad key length"))?;
        let scalar =
            Scalar::from_bytes_be(&sk_arr).ok_or_else(|| invalid("bad key encoding"))?;
        let sk = SecretKey(scalar);
        let pk = PublicKey(dhp_core::group::G2Element::generator().mul(&sk.0));
        let seq = store.get("authority.seq").and_then(|v| v.parse().ok()).unwrap_or(0);
        Ok(HealthAuthority {
            sk,
            pk,
            store: Some(Mutex::new(store)),
            push_seq: Mutex::new(seq),
        })
    }

    pub fn public_key(&self) -> PublicKey {
        self.pk
    }

    /// Push one record for one user to all n servers. Phase one hands every
    /// server the signed record; phase two asks the closing server to turn
    /// its plaintext into the closing share; phase three commits. Any
    /// failure aborts everywhere, so no server keeps a partial state.
    pub fn push(
        &self,
        uid: &str,
        record: &HealthRecord,
        endpoints: &[Arc<dyn Endpoint>],
    ) -> Result<(), ProtocolError> {
        let n = endpoints.len();
        if n == 0 {
            return Err(ProtocolError::BadRequest("no servers to push to".into()));
        }
        let canonical = record.canonical_bytes();
        let sig = sig_sign(&self.sk, &health_binding(uid, &canonical));
        let push = IngestPushReq {
            uid: uid.to_string(),
            record: Bytes(canonical),
            sig: Bytes(sig.0.to_compressed().to_vec()),
        };
        let session_id = {
            let mut seq = self.push_seq.lock().expect("seq lock");
            *seq += 1;
            format!("ingest-{seq}")
        };

        let result = (|| {
            for endpoint in endpoints {
                let reply =
                    endpoint.call(Envelope::request(msg::INGEST_PUSH, &session_id, &push))?;
                reply.expect_reply::<Ack>(msg::INGEST_PUSH)?;
            }
            let complete = IngestUidReq { uid: uid.to_string() };
            let reply = endpoints[n - 1]
                .call(Envelope::request(msg::INGEST_COMPLETE, &session_id, &complete))?;
            reply.expect_reply::<Ack>(msg::INGEST_COMPLETE)?;
            for endpoint in endpoints {
                let reply =
                    endpoint.call(Envelope::request(msg::INGEST_COMMIT, &session_id, &complete))?;
                reply.expect_reply::<Ack>(msg::INGEST_COMMIT)?;
            }
            Ok(())
        })();

        if result.is_err() {
            let abort = IngestUidReq { uid: uid.to_string() };
            for endpoint in endpoints {
                let _ = endpoint.call(Envelope::request(msg::INGEST_ABORT, &session_id, &abort));
            }
            return result;
        }

        if let Some(store) = &self.store {
            let mut store = store.lock().expect("authority store lock");
            let seq = *self.push_seq.lock().expect("seq lock");
            store.set("authority.seq", &seq.to_string()).map_err(store_err)?;
            store
                .set(&format!("pushed.{uid}.{seq}"), &hex::encode(record.canonical_bytes()))
                .map_err(store_err)?;
        }
        Ok(())
    }
}

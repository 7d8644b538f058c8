//! One issuing server: holds a key share of every policy signing key and
//! of the password-PRF key, an XOR share of each user's health record,
//! and the per-user session table that ties a round-1 nonce to a round-2
//! request.
//!
//! A node never sees a password, a health record it could read alone, or
//! the message it signs during issuance. What it does insist on: both
//! authentication factors over a binding that includes every server's
//! fresh nonce, reconstruction digests that agree, and a policy that is
//! actually satisfied right now. Session state is RAM-only by design; a
//! restart forgets half-open flows but never committed data.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use dhp_core::blindsig::{
    dsig_sign, sig_kgen, sig_sign, sig_vf, PublicKey, SecretKey, SigningKeyShare,
};
use dhp_core::group::{G2Element, Scalar};
use dhp_core::passauth::{oprf_eval, OprfKeyShare};
use dhp_core::sharing::{final_share, random_share, secret_digest, Share, ShareRecord};
use zeroize::Zeroizing;

use crate::codec::{digest_from, g1_from, pk_from, sig_from, scalar_from};
use crate::entropy::EntropySource;
use crate::health::HealthRecord;
use crate::message::{
    enrol_binding, health_binding, issuance_binding, msg, peer_pending_binding,
    peer_share_binding, pop_binding, refresh_binding, Ack, Bytes, EnrollDiscardReq,
    EnrollFinalizeReq, Envelope, IngestPushReq, IngestUidReq, IssueRound2Req, IssueRound2Resp,
    OprfRound1Req, OprfRound1Resp, PeerPendingReq, PeerShareReq, PeerShareResp, PingResp,
    ProtocolError, RefreshApplyResp, RefreshDeltaReq,
};
use crate::policy::{policy_eval, PolicyRegistry, PublicPolicy};
use crate::store::Store;
use crate::time::Clock;
use crate::transport::{Endpoint, Handler};

pub const DEFAULT_SESSION_TTL: u64 = 120;

struct Session {
    nonce: [u8; 16],
    created: u64,
    /// Set once round 2 runs; blocks a second round 2 but not peer share
    /// release, which other servers may still need for the same flow.
    consumed: bool,
}

enum PendingIngest {
    /// Servers 1..n-1: a random share drawn at push time, independent of
    /// the record.
    Leading { digest: [u8; 32], share: Vec<u8> },
    /// The closing server between push and complete: still holds the
    /// plaintext, in RAM only.
    Raw { record: Zeroizing<Vec<u8>>, digest: [u8; 32] },
    /// The closing server after complete: the computed closing share.
    Ready { digest: [u8; 32], share: Vec<u8> },
}

#[derive(Default)]
struct RefreshState {
    drawn: bool,
    received: BTreeMap<u32, ReceivedDelta>,
}

struct ReceivedDelta {
    oprf: Scalar,
    sig: BTreeMap<String, Scalar>,
}

struct ServerState {
    store: Store,
    entropy: EntropySource,
    identity_sk: SecretKey,
    identity_pk: PublicKey,
    peer_pks: BTreeMap<u32, PublicKey>,
    ha_pk: Option<PublicKey>,
    registry: PolicyRegistry,
    oprf_share: OprfKeyShare,
    sig_shares: BTreeMap<String, SigningKeyShare>,
    sessions: HashMap<String, Session>,
    pending: HashMap<String, PendingIngest>,
    refresh: Option<RefreshState>,
}

pub struct ServerNode {
    index: u32,
    n: u32,
    session_ttl: u64,
    clock: Arc<dyn Clock>,
    state: Mutex<ServerState>,
    peers: Mutex<BTreeMap<u32, Arc<dyn Endpoint>>>,
}

/// A server's public stake in one signing key, with proof of possession.
#[derive(Debug, Clone)]
pub struct KeyContribution {
    pub label: String,
    pub index: u32,
    pub contribution: Vec<u8>,
    pub pop: Vec<u8>,
}

fn store_err(e: std::io::Error) -> ProtocolError {
    ProtocolError::Transport(format!("storage: {e}"))
}

fn io_invalid(what: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, what.into())
}

/// Store keys embed the uid, so the uid alphabet is restricted to what
/// the key-value file can carry unambiguously.
fn check_uid(uid: &str) -> Result<(), ProtocolError> {
    let ok = !uid.is_empty()
        && uid.len() <= 64
        && uid.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
    if ok {
        Ok(())
    } else {
        Err(ProtocolError::BadRequest(
            "uid must be 1-64 characters of [A-Za-z0-9_-]".into(),
        ))
    }
}

impl ServerState {
    fn enrolled(&self, uid: &str) -> bool {
        self.store
            .get_bytes(&format!("user.{uid}.pk_c"))
            .map(|b| !b.is_empty())
            .unwrap_or(false)
    }

    fn user_keys(&self, uid: &str) -> Result<(PublicKey, PublicKey), ProtocolError> {
        let pk_c = self
            .store
            .get_bytes(&format!("user.{uid}.pk_c"))
            .filter(|b| !b.is_empty())
            .ok_or_else(|| ProtocolError::UnknownUid(uid.into()))?;
        let pk_se = self
            .store
            .get_bytes(&format!("user.{uid}.pk_se"))
            .filter(|b| !b.is_empty())
            .ok_or_else(|| ProtocolError::UnknownUid(uid.into()))?;
        Ok((
            pk_from(&pk_c, "stored client key").map_err(|_| corrupt("client key"))?,
            pk_from(&pk_se, "stored SE key").map_err(|_| corrupt("SE key"))?,
        ))
    }

    fn health_share(&self, uid: &str) -> Option<([u8; 32], Vec<u8>)> {
        let digest = self.store.get_bytes(&format!("health.{uid}.digest"))?;
        let share = self.store.get_bytes(&format!("health.{uid}.share"))?;
        digest.try_into().ok().map(|d| (d, share))
    }

    fn persist_shares(&mut self) -> Result<(), ProtocolError> {
        let oprf_bytes = self.oprf_share.share.to_bytes_be();
        self.store.set_bytes("oprf.share", &oprf_bytes).map_err(store_err)?;
        self.store
            .set("oprf.epoch", &self.oprf_share.epoch.to_string())
            .map_err(store_err)?;
        let entries: Vec<(String, [u8; 32], u64)> = self
            .sig_shares
            .iter()
            .map(|(label, s)| (label.clone(), s.share.to_bytes_be(), s.epoch))
            .collect();
        for (label, bytes, epoch) in entries {
            self.store
                .set_bytes(&format!("sig.{label}.share"), &bytes)
                .map_err(store_err)?;
            self.store
                .set(&format!("sig.{label}.epoch"), &epoch.to_string())
                .map_err(store_err)?;
        }
        Ok(())
    }
}

fn corrupt(what: &str) -> ProtocolError {
    ProtocolError::Integrity(format!("corrupt stored {what}"))
}

impl ServerNode {
    /// Fresh node: draws its identity keypair and every key share from the
    /// given seed and persists them. Peer directory and authority key are
    /// installed separately once all nodes exist.
    pub fn bootstrap(
        index: u32,
        n: u32,
        session_ttl: u64,
        path: impl AsRef<Path>,
        seed: [u8; 32],
        policies: &[PublicPolicy],
        clock: Arc<dyn Clock>,
    ) -> std::io::Result<ServerNode> {
        assert!(index >= 1 && index <= n, "index out of range");
        let registry = PolicyRegistry::new(policies.to_vec())
            .map_err(|e| io_invalid(format!("policy registry: {e}")))?;
        let mut store = Store::open(path)?;
        let mut entropy = EntropySource::from_seed(seed);

        let (identity_sk, identity_pk) = sig_kgen(&entropy.bytes32());
        let oprf_share = OprfKeyShare {
            epoch: 0,
            share: Scalar::derive(b"dhp-oprf-kgen", &entropy.bytes32()),
        };
        let mut sig_shares = BTreeMap::new();
        for pp in policies {
            sig_shares.insert(
                pp.pp_id.clone(),
                SigningKeyShare {
                    index: index as usize,
                    epoch: 0,
                    policy_label: pp.pp_id.clone(),
                    share: Scalar::derive(b"dhp-dsig-kgen", &entropy.bytes32()),
                },
            );
        }

        store.set("server.index", &index.to_string())?;
        store.set("server.n", &n.to_string())?;
        store.set("server.ttl", &session_ttl.to_string())?;
        store.set_bytes("server.seed", &seed)?;
        store.set("server.boots", "1")?;
        store.set_bytes("identity.sk", &identity_sk.0.to_bytes_be())?;
        store.set_bytes("identity.pk", &identity_pk.0.to_compressed())?;
        for pp in policies {
            let json = serde_json::to_string(pp).map_err(|e| io_invalid(e.to_string()))?;
            store.set(&format!("policy.{}", pp.pp_id), &json)?;
        }

        let mut state = ServerState {
            store,
            entropy,
            identity_sk,
            identity_pk,
            peer_pks: BTreeMap::new(),
            ha_pk: None,
            registry,
            oprf_share,
            sig_shares,
            sessions: HashMap::new(),
            pending: HashMap::new(),
            refresh: None,
        };
        state.persist_shares().map_err(|e| io_invalid(e.to_string()))?;

        Ok(ServerNode {
            index,
            n,
            session_ttl,
            clock,
            state: Mutex::new(state),
            peers: Mutex::new(BTreeMap::new()),
        })
    }

    /// Rebuild a node from its persistence file. Key material, users,
    /// health shares and the policy registry survive; sessions and pending
    /// ingests do not.
    pub fn reopen(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> std::io::Result<ServerNode> {
        let mut store = Store::open(path)?;
        let get = |store: &Store, key: &str| -> std::io::Result<String> {
            store
                .get(key)
                .map(str::to_string)
                .ok_or_else(|| io_invalid(format!("missing {key}")))
        };
        let get_bytes = |store: &Store, key: &str| -> std::io::Result<Vec<u8>> {
            store
                .get_bytes(key)
                .ok_or_else(|| io_invalid(format!("missing {key}")))
        };

        let index: u32 = get(&store, "server.index")?.parse().map_err(|_| io_invalid("index"))?;
        let n: u32 = get(&store, "server.n")?.parse().map_err(|_| io_invalid("n"))?;
        let session_ttl: u64 = get(&store, "server.ttl")?.parse().map_err(|_| io_invalid("ttl"))?;

        // Per-boot entropy stream: reproducible for a fixed command
        // sequence, never a repeat of a previous boot's stream.
        let seed: [u8; 32] = get_bytes(&store, "server.seed")?
            .try_into()
            .map_err(|_| io_invalid("seed"))?;
        let boots: u64 = get(&store, "server.boots")?.parse().map_err(|_| io_invalid("boots"))?;
        store.set("server.boots", &(boots + 1).to_string())?;
        let entropy = EntropySource::from_seed(seed).child(&format!("boot-{}", boots + 1));

        let sk_bytes: [u8; 32] = get_bytes(&store, "identity.sk")?
            .try_into()
            .map_err(|_| io_invalid("identity.sk"))?;
        let identity_sk = SecretKey(
            Scalar::from_bytes_be(&sk_bytes).ok_or_else(|| io_invalid("identity.sk"))?,
        );
        let pk_bytes: [u8; 96] = get_bytes(&store, "identity.pk")?
            .try_into()
            .map_err(|_| io_invalid("identity.pk"))?;
        let identity_pk = PublicKey(
            G2Element::from_compressed(&pk_bytes).ok_or_else(|| io_invalid("identity.pk"))?,
        );

        let mut policies = Vec::new();
        let policy_keys: Vec<String> =
            store.keys_with_prefix("policy.").map(str::to_string).collect();
        for key in policy_keys {
            let pp: PublicPolicy = serde_json::from_str(get(&store, &key)?.as_str())
                .map_err(|e| io_invalid(format!("{key}: {e}")))?;
            policies.push(pp);
        }
        policies.sort_by(|a, b| a.pp_id.cmp(&b.pp_id));
        let registry =
            PolicyRegistry::new(policies.clone()).map_err(|e| io_invalid(e.to_string()))?;

        let oprf_bytes: [u8; 32] = get_bytes(&store, "oprf.share")?
            .try_into()
            .map_err(|_| io_invalid("oprf.share"))?;
        let oprf_share = OprfKeyShare {
            epoch: get(&store, "oprf.epoch")?.parse().map_err(|_| io_invalid("oprf.epoch"))?,
            share: Scalar::from_bytes_be(&oprf_bytes).ok_or_else(|| io_invalid("oprf.share"))?,
        };

        let mut sig_shares = BTreeMap::new();
        for pp in &policies {
            let bytes: [u8; 32] = get_bytes(&store, &format!("sig.{}.share", pp.pp_id))?
                .try_into()
                .map_err(|_| io_invalid("sig share"))?;
            let epoch: u64 = get(&store, &format!("sig.{}.epoch", pp.pp_id))?
                .parse()
                .map_err(|_| io_invalid("sig epoch"))?;
            sig_shares.insert(
                pp.pp_id.clone(),
                SigningKeyShare {
                    index: index as usize,
                    epoch,
                    policy_label: pp.pp_id.clone(),
                    share: Scalar::from_bytes_be(&bytes).ok_or_else(|| io_invalid("sig share"))?,
                },
            );
        }

        let mut peer_pks = BTreeMap::new();
        let peer_keys: Vec<String> =
            store.keys_with_prefix("peer.").map(str::to_string).collect();
        for key in peer_keys {
            let i: u32 = key
                .trim_start_matches("peer.")
                .trim_end_matches(".pk")
                .parse()
                .map_err(|_| io_invalid(&*key))?;
            let bytes: [u8; 96] =
                get_bytes(&store, &key)?.try_into().map_err(|_| io_invalid(&*key))?;
            peer_pks.insert(
                i,
                PublicKey(G2Element::from_compressed(&bytes).ok_or_else(|| io_invalid(&*key))?),
            );
        }

        let ha_pk = match store.get_bytes("ha.pk") {
            Some(bytes) if !bytes.is_empty() => {
                let arr: [u8; 96] = bytes.try_into().map_err(|_| io_invalid("ha.pk"))?;
                Some(PublicKey(
                    G2Element::from_compressed(&arr).ok_or_else(|| io_invalid("ha.pk"))?,
                ))
            }
            _ => None,
        };

        Ok(ServerNode {
            index,
            n,
            session_ttl,
            clock,
            state: Mutex::new(ServerState {
                store,
                entropy,
                identity_sk,
                identity_pk,
                peer_pks,
                ha_pk,
                registry,
                oprf_share,
                sig_shares,
                sessions: HashMap::new(),
                pending: HashMap::new(),
                refresh: None,
            }),
            peers: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn identity_public(&self) -> PublicKey {
        self.state.lock().expect("state lock").identity_pk
    }

    /// Public contributions to every policy key, each with a proof of
    /// possession signed under the contribution itself.
    pub fn key_contributions(&self) -> Vec<KeyContribution> {
        let st = self.state.lock().expect("state lock");
        st.sig_shares
            .values()
            .map(|share| {
                let contribution = share.contribution().0.to_compressed().to_vec();
                let binding = pop_binding(&share.policy_label, self.index, &contribution);
                let pop = sig_sign(&SecretKey(share.share), &binding);
                KeyContribution {
                    label: share.policy_label.clone(),
                    index: self.index,
                    contribution,
                    pop: pop.0.to_compressed().to_vec(),
                }
            })
            .collect()
    }

    /// Install every server's identity key (own included) and the health
    /// authority's key. Persisted, so a reopened node keeps its directory.
    pub fn install_directory(
        &self,
        peers: &BTreeMap<u32, PublicKey>,
        ha: &PublicKey,
    ) -> std::io::Result<()> {
        let mut st = self.state.lock().expect("state lock");
        for (i, pk) in peers {
            st.store.set_bytes(&format!("peer.{i}.pk"), &pk.0.to_compressed())?;
        }
        st.store.set_bytes("ha.pk", &ha.0.to_compressed())?;
        st.peer_pks = peers.clone();
        st.ha_pk = Some(*ha);
        Ok(())
    }

    /// Wire up transport to the other servers. Not persisted; the process
    /// that owns the node decides how its peers are reached.
    pub fn set_peers(&self, endpoints: BTreeMap<u32, Arc<dyn Endpoint>>) {
        *self.peers.lock().expect("peers lock") = endpoints;
    }

    fn peer_endpoints(&self) -> BTreeMap<u32, Arc<dyn Endpoint>> {
        self.peers.lock().expect("peers lock").clone()
    }

    fn dispatch(&self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        match env.msg_type.as_str() {
            msg::PING => Ok(env.reply(&PingResp { index: self.index, n: self.n })),
            msg::ENROLL_ROUND1 => self.oprf_round1(env, false),
            msg::ISSUE_ROUND1 => self.oprf_round1(env, true),
            msg::ENROLL_FINALIZE => self.enroll_finalize(env),
            msg::ENROLL_DISCARD => self.enroll_discard(env),
            msg::ISSUE_ROUND2 => self.issue_round2(env),
            msg::INGEST_PUSH => self.ingest_push(env),
            msg::INGEST_COMPLETE => self.ingest_complete(env),
            msg::INGEST_COMMIT => self.ingest_commit(env),
            msg::INGEST_ABORT => self.ingest_abort(env),
            msg::PEER_PENDING => self.peer_pending(env),
            msg::PEER_SHARE => self.peer_share(env),
            msg::REFRESH_START => self.refresh_start(env),
            msg::REFRESH_DELTA => self.refresh_delta(env),
            msg::REFRESH_APPLY => self.refresh_apply(env),
            other => Err(ProtocolError::BadRequest(format!("unknown message type {other}"))),
        }
    }

    /// Shared round 1 of enrolment and issuance: evaluate the blinded
    /// credential under the OPRF share and open a session with a fresh
    /// nonce. Issuance additionally requires the uid to exist.
    fn oprf_round1(&self, env: &Envelope, require_enrolled: bool) -> Result<Envelope, ProtocolError> {
        let req: OprfRound1Req = env.open()?;
        check_uid(&req.uid)?;
        let mut st = self.state.lock().expect("state lock");
        if require_enrolled && !st.enrolled(&req.uid) {
            return Err(ProtocolError::UnknownUid(req.uid));
        }
        let alpha = g1_from(req.alpha.as_slice(), "alpha")?;
        let eval = oprf_eval(&st.oprf_share, self.index as usize, &alpha)
            .map_err(|e| ProtocolError::BadRequest(e.to_string()))?;
        let nonce = st.entropy.bytes16();
        // A fresh round 1 supersedes any previous session for the uid.
        st.sessions.insert(
            req.uid.clone(),
            Session { nonce, created: self.clock.now(), consumed: false },
        );
        Ok(env.reply(&OprfRound1Resp {
            index: self.index,
            eval: Bytes(eval.element.to_compressed().to_vec()),
            nonce: Bytes(nonce.to_vec()),
        }))
    }

    /// Check the live session and the nonce vector position for this
    /// server. Returns the session's creation time for staleness handling.
    fn check_session(
        st: &mut ServerState,
        uid: &str,
        nonces: &[Bytes],
        index: u32,
        n: u32,
        ttl: u64,
        now: u64,
    ) -> Result<(), ProtocolError> {
        let (nonce, created, consumed) = {
            let session = st
                .sessions
                .get(uid)
                .ok_or_else(|| ProtocolError::Session(format!("no live session for {uid}")))?;
            (session.nonce, session.created, session.consumed)
        };
        if now.saturating_sub(created) > ttl {
            st.sessions.remove(uid);
            return Err(ProtocolError::Session("session expired".into()));
        }
        if consumed {
            return Err(ProtocolError::Session("session already used".into()));
        }
        if nonces.len() != n as usize {
            return Err(ProtocolError::Session(format!(
                "expected {n} server nonces, got {}",
                nonces.len()
            )));
        }
        if nonces[(index - 1) as usize].as_slice() != nonce {
            return Err(ProtocolError::Session("session nonce mismatch".into()));
        }
        Ok(())
    }

    fn enroll_finalize(&self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        let req: EnrollFinalizeReq = env.open()?;
        check_uid(&req.uid)?;
        let mut st = self.state.lock().expect("state lock");
        Self::check_session(
            &mut st,
            &req.uid,
            &req.nonces,
            self.index,
            self.n,
            self.session_ttl,
            self.clock.now(),
        )?;
        if st.enrolled(&req.uid) {
            return Err(ProtocolError::BadRequest(format!("{} already enrolled", req.uid)));
        }

        let pk_c = pk_from(req.pk_c.as_slice(), "pk_c")?;
        let pk_se = pk_from(req.pk_se.as_slice(), "pk_se")?;
        let binding = enrol_binding(
            &req.uid,
            req.pk_c.as_slice(),
            req.pk_se.as_slice(),
            &req.consent,
            &req.nonces,
        );
        if !sig_vf(&pk_c, &binding, &sig_from(req.sig_c.as_slice(), "sig_c")?) {
            return Err(ProtocolError::Auth("client key signature rejected".into()));
        }
        if !sig_vf(&pk_se, &binding, &sig_from(req.sig_se.as_slice(), "sig_se")?) {
            return Err(ProtocolError::Auth("second-factor signature rejected".into()));
        }

        st.store
            .set_bytes(&format!("user.{}.pk_c", req.uid), req.pk_c.as_slice())
            .map_err(store_err)?;
        st.store
            .set_bytes(&format!("user.{}.pk_se", req.uid), req.pk_se.as_slice())
            .map_err(store_err)?;
        st.store
            .set_bytes(&format!("user.{}.consent", req.uid), req.consent.as_bytes())
            .map_err(store_err)?;
        st.sessions.get_mut(&req.uid).expect("session checked").consumed = true;
        Ok(env.reply(&Ack {}))
    }

    /// Best-effort rollback of a failed enrolment: drop the session and
    /// blank any user record this server already wrote.
    fn enroll_discard(&self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        let req: EnrollDiscardReq = env.open()?;
        check_uid(&req.uid)?;
        let mut st = self.state.lock().expect("state lock");
        st.sessions.remove(&req.uid);
        if st.enrolled(&req.uid) {
            for field in ["pk_c", "pk_se", "consent"] {
                st.store
                    .set(&format!("user.{}.{field}", req.uid), "")
                    .map_err(store_err)?;
            }
        }
        Ok(env.reply(&Ack {}))
    }

    fn issue_round2(&self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        let req: IssueRound2Req = env.open()?;
        check_uid(&req.uid)?;

        // Phase 1, under the lock: session, both authentication factors,
        // policy lookup. The session is consumed here, before any peer
        // traffic, so a concurrent replay cannot obtain a second partial.
        let (beta, policy, sig_share, identity_sk, own_record) = {
            let mut st = self.state.lock().expect("state lock");
            Self::check_session(
                &mut st,
                &req.uid,
                &req.nonces,
                self.index,
                self.n,
                self.session_ttl,
                self.clock.now(),
            )?;
            if !st.enrolled(&req.uid) {
                return Err(ProtocolError::UnknownUid(req.uid.clone()));
            }
            let (pk_c, pk_se) = st.user_keys(&req.uid)?;
            let policy = st.registry.get(&req.pp_id).map_err(|_| {
                ProtocolError::UnknownPolicy(req.pp_id.clone())
            })?.clone();
            let sig_share = st
                .sig_shares
                .get(&req.pp_id)
                .ok_or_else(|| ProtocolError::UnknownPolicy(req.pp_id.clone()))?
                .clone();
            let beta = g1_from(req.beta.as_slice(), "beta")?;

            let binding =
                issuance_binding(&req.uid, &req.pp_id, &req.nonces, req.beta.as_slice());
            if !sig_vf(&pk_c, &binding, &sig_from(req.sig_c.as_slice(), "sig_c")?) {
                return Err(ProtocolError::Auth("client key signature rejected".into()));
            }
            if !sig_vf(&pk_se, &binding, &sig_from(req.sig_se.as_slice(), "sig_se")?) {
                return Err(ProtocolError::Auth("second-factor signature rejected".into()));
            }

            let own = st.health_share(&req.uid).ok_or_else(|| {
                ProtocolError::Policy(format!("no health record stored for {}", req.uid))
            })?;
            st.sessions.get_mut(&req.uid).expect("session checked").consumed = true;
            (beta, policy, sig_share, st.identity_sk, own)
        };

        // Phase 2, lock released: collect the other servers' shares. Each
        // peer sees a request signed by this server's identity key and
        // carrying the session's nonce vector, and only releases its share
        // if its own nonce is in there.
        let peers = self.peer_endpoints();
        let mut records = vec![ShareRecord {
            digest: own_record.0,
            share: Share { index: self.index as usize, bytes: own_record.1 },
        }];
        for (&j, endpoint) in peers.iter().filter(|(&j, _)| j != self.index) {
            let binding = peer_share_binding(&req.uid, self.index, &req.nonces);
            let peer_req = PeerShareReq {
                uid: req.uid.clone(),
                requester: self.index,
                nonces: req.nonces.clone(),
                sig: Bytes(sig_sign(&identity_sk, &binding).0.to_compressed().to_vec()),
            };
            let reply = endpoint
                .call(Envelope::request(msg::PEER_SHARE, &env.session_id, &peer_req))?;
            let share: PeerShareResp = reply.expect_reply(msg::PEER_SHARE)?;
            if share.index != j {
                return Err(ProtocolError::Integrity(format!(
                    "peer {j} answered with index {}",
                    share.index
                )));
            }
            records.push(ShareRecord {
                digest: digest_from(share.digest.as_slice())?,
                share: Share { index: j as usize, bytes: share.share.0 },
            });
        }

        // Phase 3: reconstruct, evaluate, sign the blinded point. The
        // plaintext buffer is zeroized as soon as this scope ends.
        let plain = Zeroizing::new(
            dhp_core::sharing::guarded_reconstruct(self.n as usize, &records)
                .map_err(|e| ProtocolError::Integrity(e.to_string()))?,
        );
        let record = HealthRecord::from_canonical_bytes(&plain)
            .ok_or_else(|| ProtocolError::Integrity("reconstructed record does not parse".into()))?;
        if !policy_eval(&record, &policy, self.clock.now()) {
            return Err(ProtocolError::Policy(format!("{} not satisfied", req.pp_id)));
        }
        let partial = dsig_sign(&sig_share, &beta)
            .map_err(|e| ProtocolError::BadRequest(e.to_string()))?;
        Ok(env.reply(&IssueRound2Resp {
            index: self.index,
            epoch: partial.epoch,
            partial: Bytes(partial.element.to_compressed().to_vec()),
        }))
    }

    fn peer_share(&self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        let req: PeerShareReq = env.open()?;
        check_uid(&req.uid)?;
        let mut st = self.state.lock().expect("state lock");
        if req.requester == self.index || req.requester < 1 || req.requester > self.n {
            return Err(ProtocolError::UnknownPeer(req.requester));
        }
        let requester_pk = st
            .peer_pks
            .get(&req.requester)
            .cloned()
            .ok_or(ProtocolError::UnknownPeer(req.requester))?;
        let binding = peer_share_binding(&req.uid, req.requester, &req.nonces);
        if !sig_vf(&requester_pk, &binding, &sig_from(req.sig.as_slice(), "peer sig")?) {
            return Err(ProtocolError::Auth("peer signature rejected".into()));
        }

        // Release only against a live session of our own for this uid:
        // that session's nonce must sit at our slot of the request vector.
        // `consumed` is fine; our own round 2 may already have run.
        let session = st
            .sessions
            .get(&req.uid)
            .ok_or_else(|| ProtocolError::Session("no live issuance session here".into()))?;
        if self.clock.now().saturating_sub(session.created) > self.session_ttl {
            st.sessions.remove(&req.uid);
            return Err(ProtocolError::Session("issuance session expired".into()));
        }
        if req.nonces.len() != self.n as usize
            || req.nonces[(self.index - 1) as usize].as_slice() != session.nonce
        {
            return Err(ProtocolError::Session("our session nonce is not in the request".into()));
        }

        let (digest, share) = st
            .health_share(&req.uid)
            .ok_or_else(|| ProtocolError::Integrity(format!("no stored share for {}", req.uid)))?;
        Ok(env.reply(&PeerShareResp {
            index: self.index,
            digest: Bytes(digest.to_vec()),
            share: Bytes(share),
        }))
    }

    fn ingest_push(&self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        let req: IngestPushReq = env.open()?;
        check_uid(&req.uid)?;
        let mut st = self.state.lock().expect("state lock");
        let ha_pk = st
            .ha_pk
            .ok_or_else(|| ProtocolError::Auth("no authority key installed".into()))?;
        let binding = health_binding(&req.uid, req.record.as_slice());
        if !sig_vf(&ha_pk, &binding, &sig_from(req.sig.as_slice(), "authority sig")?) {
            return Err(ProtocolError::Auth("authority signature rejected".into()));
        }
        if !st.enrolled(&req.uid) {
            return Err(ProtocolError::UnknownUid(req.uid));
        }
        if HealthRecord::from_canonical_bytes(req.record.as_slice()).is_none() {
            return Err(ProtocolError::BadRequest("record does not parse".into()));
        }

        let digest = secret_digest(req.record.as_slice());
        let entry = if self.index < self.n {
            let share = random_share(req.record.len(), st.entropy.rng());
            PendingIngest::Leading { digest, share }
        } else {
            PendingIngest::Raw { record: Zeroizing::new(req.record.0), digest }
        };
        st.pending.insert(req.uid, entry);
        Ok(env.reply(&Ack {}))
    }

    /// Closing step, only at server n: pull every peer's pending share and
    /// derive the closing share so that all n XOR back to the record.
    fn ingest_complete(&self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        let req: IngestUidReq = env.open()?;
        check_uid(&req.uid)?;
        let (record, digest, identity_sk) = {
            let st = self.state.lock().expect("state lock");
            if self.index != self.n {
                return Err(ProtocolError::BadRequest(
                    "complete is handled by the closing server".into(),
                ));
            }
            match st.pending.get(&req.uid) {
                Some(PendingIngest::Raw { record, digest }) => {
                    (record.clone(), *digest, st.identity_sk)
                }
                Some(_) => {
                    return Err(ProtocolError::BadRequest("ingest already completed".into()))
                }
                None => return Err(ProtocolError::BadRequest("no pending record".into())),
            }
        };

        let peers = self.peer_endpoints();
        let mut leading: Vec<Vec<u8>> = Vec::new();
        for (&j, endpoint) in peers.iter().filter(|(&j, _)| j != self.index) {
            let peer_req = PeerPendingReq {
                uid: req.uid.clone(),
                requester: self.index,
                sig: Bytes(
                    sig_sign(&identity_sk, &peer_pending_binding(&req.uid, self.index))
                        .0
                        .to_compressed()
                        .to_vec(),
                ),
            };
            let reply = endpoint
                .call(Envelope::request(msg::PEER_PENDING, &env.session_id, &peer_req))?;
            let share: PeerShareResp = reply.expect_reply(msg::PEER_PENDING)?;
            if share.index != j || digest_from(share.digest.as_slice())? != digest {
                return Err(ProtocolError::Integrity(format!(
                    "pending digest disagreement at server {j}"
                )));
            }
            leading.push(share.share.0);
        }

        let closing = final_share(&record, &leading)
            .map_err(|e| ProtocolError::Integrity(e.to_string()))?;
        let mut st = self.state.lock().expect("state lock");
        match st.pending.get(&req.uid) {
            Some(PendingIngest::Raw { .. }) => {
                st.pending
                    .insert(req.uid, PendingIngest::Ready { digest, share: closing });
                Ok(env.reply(&Ack {}))
            }
            _ => Err(ProtocolError::Session("ingest aborted mid-flight".into())),
        }
    }

    fn peer_pending(&self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        let req: PeerPendingReq = env.open()?;
        check_uid(&req.uid)?;
        let st = self.state.lock().expect("state lock");
        if req.requester != self.n || req.requester == self.index {
            return Err(ProtocolError::UnknownPeer(req.requester));
        }
        let requester_pk = st
            .peer_pks
            .get(&req.requester)
            .cloned()
            .ok_or(ProtocolError::UnknownPeer(req.requester))?;
        let binding = peer_pending_binding(&req.uid, req.requester);
        if !sig_vf(&requester_pk, &binding, &sig_from(req.sig.as_slice(), "peer sig")?) {
            return Err(ProtocolError::Auth("peer signature rejected".into()));
        }
        match st.pending.get(&req.uid) {
            Some(PendingIngest::Leading { digest, share }) => Ok(env.reply(&PeerShareResp {
                index: self.index,
                digest: Bytes(digest.to_vec()),
                share: Bytes(share.clone()),
            })),
            _ => Err(ProtocolError::Session(format!("no pending ingest for {}", req.uid))),
        }
    }

    fn ingest_commit(&self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        let req: IngestUidReq = env.open()?;
        check_uid(&req.uid)?;
        let mut st = self.state.lock().expect("state lock");
        match st.pending.remove(&req.uid) {
            Some(PendingIngest::Leading { digest, share })
            | Some(PendingIngest::Ready { digest, share }) => {
                st.store
                    .set_bytes(&format!("health.{}.digest", req.uid), &digest)
                    .map_err(store_err)?;
                st.store
                    .set_bytes(&format!("health.{}.share", req.uid), &share)
                    .map_err(store_err)?;
                Ok(env.reply(&Ack {}))
            }
            Some(raw @ PendingIngest::Raw { .. }) => {
                st.pending.insert(req.uid, raw);
                Err(ProtocolError::BadRequest("complete must run before commit".into()))
            }
            None => Err(ProtocolError::BadRequest("nothing pending to commit".into())),
        }
    }

    fn ingest_abort(&self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        let req: IngestUidReq = env.open()?;
        check_uid(&req.uid)?;
        let mut st = self.state.lock().expect("state lock");
        st.pending.remove(&req.uid);
        Ok(env.reply(&Ack {}))
    }

    /// Draw this server's zero-sum delta vectors and hand each peer its
    /// component. Application waits for `refresh-apply`.
    fn refresh_start(&self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        let (outgoing, identity_sk) = {
            let mut st = self.state.lock().expect("state lock");
            if self.n < 2 {
                return Err(ProtocolError::Refresh(
                    "refresh needs at least two servers".into(),
                ));
            }
            let refresh = st.refresh.get_or_insert_with(RefreshState::default);
            if refresh.drawn {
                return Err(ProtocolError::Refresh("refresh already in progress".into()));
            }
            refresh.drawn = true;

            let n = self.n as usize;
            let seed = st.entropy.bytes32();
            let oprf_vec = dhp_core::blindsig::dsig_refresh_deltas(n, &seed)
                .map_err(|e| ProtocolError::Refresh(e.to_string()))?;
            let mut sig_vecs: BTreeMap<String, Vec<Scalar>> = BTreeMap::new();
            let labels: Vec<String> = st.sig_shares.keys().cloned().collect();
            for label in &labels {
                let seed = st.entropy.bytes32();
                sig_vecs.insert(
                    label.clone(),
                    dhp_core::blindsig::dsig_refresh_deltas(n, &seed)
                        .map_err(|e| ProtocolError::Refresh(e.to_string()))?,
                );
            }

            // Keep our own components.
            let own = ReceivedDelta {
                oprf: oprf_vec[(self.index - 1) as usize],
                sig: sig_vecs
                    .iter()
                    .map(|(l, v)| (l.clone(), v[(self.index - 1) as usize]))
                    .collect(),
            };
            st.refresh
                .as_mut()
                .expect("just inserted")
                .received
                .insert(self.index, own);

            let mut outgoing = Vec::new();
            for j in 1..=self.n {
                if j == self.index {
                    continue;
                }
                let oprf_delta = Bytes(oprf_vec[(j - 1) as usize].to_bytes_be().to_vec());
                let sig_deltas: BTreeMap<String, Bytes> = sig_vecs
                    .iter()
                    .map(|(l, v)| (l.clone(), Bytes(v[(j - 1) as usize].to_bytes_be().to_vec())))
                    .collect();
                outgoing.push((j, oprf_delta, sig_deltas));
            }
            (outgoing, st.identity_sk)
        };

        let peers = self.peer_endpoints();
        for (j, oprf_delta, sig_deltas) in outgoing {
            let endpoint = peers
                .get(&j)
                .ok_or_else(|| ProtocolError::Transport(format!("no endpoint for server {j}")))?;
            let binding = refresh_binding(self.index, oprf_delta.as_slice(), &sig_deltas);
            let delta_req = RefreshDeltaReq {
                from: self.index,
                oprf_delta,
                sig_deltas,
                sig: Bytes(sig_sign(&identity_sk, &binding).0.to_compressed().to_vec()),
            };
            let reply = endpoint
                .call(Envelope::request(msg::REFRESH_DELTA, &env.session_id, &delta_req))?;
            let _: Ack = reply.expect_reply(msg::REFRESH_DELTA)?;
        }
        Ok(env.reply(&Ack {}))
    }

    fn refresh_delta(&self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        let req: RefreshDeltaReq = env.open()?;
        let mut st = self.state.lock().expect("state lock");
        if req.from == self.index || req.from < 1 || req.from > self.n {
            return Err(ProtocolError::UnknownPeer(req.from));
        }
        let from_pk = st
            .peer_pks
            .get(&req.from)
            .cloned()
            .ok_or(ProtocolError::UnknownPeer(req.from))?;
        let binding = refresh_binding(req.from, req.oprf_delta.as_slice(), &req.sig_deltas);
        if !sig_vf(&from_pk, &binding, &sig_from(req.sig.as_slice(), "delta sig")?) {
            return Err(ProtocolError::Auth("refresh delta signature rejected".into()));
        }

        let own_labels: Vec<&String> = st.sig_shares.keys().collect();
        let sent_labels: Vec<&String> = req.sig_deltas.keys().collect();
        if own_labels != sent_labels {
            return Err(ProtocolError::Refresh("policy set mismatch in delta".into()));
        }
        let oprf = scalar_from(req.oprf_delta.as_slice(), "oprf delta")?;
        let mut sig = BTreeMap::new();
        for (label, bytes) in &req.sig_deltas {
            sig.insert(label.clone(), scalar_from(bytes.as_slice(), "sig delta")?);
        }

        let refresh = st.refresh.get_or_insert_with(RefreshState::default);
        if refresh.received.contains_key(&req.from) {
            return Err(ProtocolError::Refresh(format!("duplicate delta from {}", req.from)));
        }
        refresh.received.insert(req.from, ReceivedDelta { oprf, sig });
        Ok(env.reply(&Ack {}))
    }

    /// Fold in one delta component from every server (own included) or
    /// refuse entirely. Epochs advance together; the combined keys do not
    /// move.
    fn refresh_apply(&self, env: &Envelope) -> Result<Envelope, ProtocolError> {
        let _: Ack = env.open()?;
        let mut st = self.state.lock().expect("state lock");
        let refresh = st.refresh.take().ok_or_else(|| {
            ProtocolError::Refresh("refresh not started".into())
        })?;
        if !refresh.drawn || refresh.received.len() != self.n as usize {
            let missing: Vec<u32> =
                (1..=self.n).filter(|i| !refresh.received.contains_key(i)).collect();
            st.refresh = Some(refresh);
            return Err(ProtocolError::Refresh(format!(
                "missing contributions from {missing:?}"
            )));
        }

        let oprf_components: Vec<Scalar> =
            (1..=self.n).map(|i| refresh.received[&i].oprf).collect();
        st.oprf_share.apply_refresh(oprf_components);
        let labels: Vec<String> = st.sig_shares.keys().cloned().collect();
        for label in labels {
            let components: Vec<Scalar> = (1..=self.n)
                .map(|i| refresh.received[&i].sig[&label])
                .collect();
            st.sig_shares.get_mut(&label).expect("own label").apply_refresh(components);
        }
        st.persist_shares()?;
        let epoch = st.oprf_share.epoch;
        Ok(env.reply(&RefreshApplyResp { epoch }))
    }
}

impl Handler for ServerNode {
    fn handle(&self, envelope: Envelope) -> Envelope {
        match self.dispatch(&envelope) {
            Ok(reply) => reply,
            Err(e) => envelope.error_reply(&e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::TestClock;
    use dhp_core::group::G1Element;

    fn policies() -> Vec<PublicPolicy> {
        vec![PublicPolicy {
            pp_id: "pp-test".into(),
            clauses: vec![crate::policy::PolicyClause::MaxVaccinationAgeDays(180)],
        }]
    }

    #[test]
    fn bootstrap_then_reopen_preserves_key_material() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("server-1.db");
        let clock: Arc<dyn Clock> = Arc::new(TestClock::at(1000));
        let node =
            ServerNode::bootstrap(1, 3, 120, &path, [9u8; 32], &policies(), clock.clone())
                .unwrap();
        let pk = node.identity_public();
        let contributions = node.key_contributions();
        drop(node);

        let reopened = ServerNode::reopen(&path, clock).unwrap();
        assert_eq!(reopened.identity_public(), pk);
        assert_eq!(reopened.index(), 1);
        assert_eq!(reopened.n(), 3);
        let again = reopened.key_contributions();
        assert_eq!(contributions.len(), again.len());
        for (a, b) in contributions.iter().zip(again.iter()) {
            assert_eq!(a.contribution, b.contribution);
        }
    }

    #[test]
    fn contribution_proofs_verify_under_the_contribution() {
        let dir = tempfile::tempdir().unwrap();
        let clock: Arc<dyn Clock> = Arc::new(TestClock::at(0));
        let node = ServerNode::bootstrap(
            2,
            3,
            120,
            dir.path().join("s.db"),
            [1u8; 32],
            &policies(),
            clock,
        )
        .unwrap();
        for c in node.key_contributions() {
            let pk = pk_from(&c.contribution, "contribution").unwrap();
            let binding = pop_binding(&c.label, c.index, &c.contribution);
            let pop = sig_from(&c.pop, "pop").unwrap();
            assert!(sig_vf(&pk, &binding, &pop));
            // A different index must not validate the same proof.
            let wrong = pop_binding(&c.label, c.index + 1, &c.contribution);
            assert!(!sig_vf(&pk, &wrong, &pop));
        }
    }

    #[test]
    fn malformed_uids_and_unknown_types_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let clock: Arc<dyn Clock> = Arc::new(TestClock::at(0));
        let node = ServerNode::bootstrap(
            1,
            1,
            120,
            dir.path().join("s.db"),
            [2u8; 32],
            &policies(),
            clock,
        )
        .unwrap();

        let bad_uid = Envelope::request(
            msg::ENROLL_ROUND1,
            "s",
            &OprfRound1Req { uid: "has space".into(), alpha: Bytes(vec![0; 48]) },
        );
        let reply = node.handle(bad_uid);
        assert!(reply.is_error());

        let unknown = Envelope::request("no-such-type", "s", &Ack {});
        let reply = node.handle(unknown);
        assert!(reply.is_error());
    }

    #[test]
    fn issue_round1_requires_an_enrolled_uid() {
        let dir = tempfile::tempdir().unwrap();
        let clock: Arc<dyn Clock> = Arc::new(TestClock::at(0));
        let node = ServerNode::bootstrap(
            1,
            1,
            120,
            dir.path().join("s.db"),
            [3u8; 32],
            &policies(),
            clock,
        )
        .unwrap();
        let alpha = Bytes(G1Element::generator().to_compressed().to_vec());
        let req = Envelope::request(
            msg::ISSUE_ROUND1,
            "s",
            &OprfRound1Req { uid: "nobody".into(), alpha: alpha.clone() },
        );
        let reply = node.handle(req);
        let err = reply
            .expect_reply::<OprfRound1Resp>(msg::ISSUE_ROUND1)
            .unwrap_err();
        assert_eq!(err.code(), "unknown-uid");

        // The enrolment variant of round 1 has no such requirement.
        let req = Envelope::request(
            msg::ENROLL_ROUND1,
            "s",
            &OprfRound1Req { uid: "nobody".into(), alpha },
        );
        assert!(!node.handle(req).is_error());
    }
}

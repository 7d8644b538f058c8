//! The venue-side verifier. Fully offline: it carries the verification
//! keys it trusts and a nonce ledger, and never talks to the issuing
//! servers. One challenge is outstanding at a time; every presented token
//! settles that session, accepted or not.

use std::collections::HashSet;
use std::path::Path;
use std::sync::{Arc, Mutex};

use dhp_core::blindsig::{dsig_vf, Signature, VerificationKey};

use crate::codec::{g1_from, g2_from};
use crate::entropy::EntropySource;
use crate::message::{Bytes, Challenge, ProtocolError, Token, TOKEN_NONCE_LEN};
use crate::metering::RoleMeter;
use crate::store::Store;
use crate::time::Clock;
use crate::transcript::Role;

/// Token freshness window in seconds: how old a challenge timestamp may be
/// at verification time.
pub const DEFAULT_FRESHNESS_WINDOW: u64 = 120;
/// How long an unanswered challenge stays open before its nonce is retired.
pub const DEFAULT_SESSION_TIMEOUT: u64 = 180;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// No open challenge to match the token against.
    NoSession,
    /// Token fields disagree with the challenge.
    FieldMismatch,
    /// The challenge nonce has already been consumed.
    NonceReused,
    /// Signature valid but the timestamp fell out of the freshness window.
    Stale,
    /// Signature does not verify under the policy's key.
    BadSignature,
    /// The token names a policy this reader has no key for.
    UnknownPolicy,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let label = match self {
            RejectReason::NoSession => "NoSession",
            RejectReason::FieldMismatch => "FieldMismatch",
            RejectReason::NonceReused => "NonceReused",
            RejectReason::Stale => "Stale",
            RejectReason::BadSignature => "BadSignature",
            RejectReason::UnknownPolicy => "UnknownPolicy",
        };
        f.write_str(label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Accept => f.write_str("Accept"),
            Verdict::Reject(reason) => write!(f, "Reject({reason})"),
        }
    }
}

struct ReaderState {
    active: Option<Challenge>,
    used: HashSet<Vec<u8>>,
    store: Option<Store>,
}

pub struct Reader {
    vid: String,
    keys: std::collections::BTreeMap<String, VerificationKey>,
    freshness_window: u64,
    session_timeout: u64,
    clock: Arc<dyn Clock>,
    entropy: Mutex<EntropySource>,
    meter: Option<RoleMeter>,
    state: Mutex<ReaderState>,
}

fn store_io(e: std::io::Error) -> ProtocolError {
    ProtocolError::Transport(format!("reader storage: {e}"))
}

impl Reader {
    pub fn new(
        vid: &str,
        keys: std::collections::BTreeMap<String, VerificationKey>,
        clock: Arc<dyn Clock>,
        entropy: EntropySource,
    ) -> Reader {
        Reader {
            vid: vid.to_string(),
            keys,
            freshness_window: DEFAULT_FRESHNESS_WINDOW,
            session_timeout: DEFAULT_SESSION_TIMEOUT,
            clock,
            entropy: Mutex::new(entropy),
            meter: None,
            state: Mutex::new(ReaderState { active: None, used: HashSet::new(), store: None }),
        }
    }

    /// Same reader, with the nonce ledger and open session persisted so a
    /// power cycle cannot reopen a spent nonce.
    pub fn bootstrap(
        path: impl AsRef<Path>,
        vid: &str,
        keys: std::collections::BTreeMap<String, VerificationKey>,
        clock: Arc<dyn Clock>,
        entropy: EntropySource,
    ) -> std::io::Result<Reader> {
        let reader = Reader::new(vid, keys, clock, entropy);
        let mut store = Store::open(path)?;
        store.set("reader.vid", vid)?;
        for (pp_id, vk) in &reader.keys {
            store.set_bytes(&format!("vk.{pp_id}"), &vk.element.to_compressed())?;
        }
        reader.state.lock().expect("reader state lock").store = Some(store);
        Ok(reader)
    }

    pub fn reopen(
        path: impl AsRef<Path>,
        clock: Arc<dyn Clock>,
        entropy: EntropySource,
    ) -> std::io::Result<Reader> {
        let store = Store::open(path)?;
        let invalid = |what: &str| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("reader file: {what}"))
        };
        let vid = store.get("reader.vid").ok_or_else(|| invalid("missing vid"))?.to_string();

        let mut keys = std::collections::BTreeMap::new();
        for key in store.keys_with_prefix("vk.") {
            let pp_id = key.trim_start_matches("vk.").to_string();
            let bytes = store.get_bytes(key).ok_or_else(|| invalid("bad key encoding"))?;
            let element =
                g2_from(&bytes, "verification key").map_err(|e| invalid(&e.to_string()))?;
            keys.insert(pp_id.clone(), VerificationKey { policy_label: pp_id, element });
        }

        let mut used = HashSet::new();
        for key in store.keys_with_prefix("used.") {
            let q = hex::decode(key.trim_start_matches("used."))
                .map_err(|_| invalid("bad nonce encoding"))?;
            used.insert(q);
        }

        let active: Option<Challenge> = match store.get("active") {
            Some(json) if !json.is_empty() => {
                serde_json::from_str(json).map_err(|e| invalid(&e.to_string()))?
            }
            _ => None,
        };

        Ok(Reader {
            vid,
            keys,
            freshness_window: DEFAULT_FRESHNESS_WINDOW,
            session_timeout: DEFAULT_SESSION_TIMEOUT,
            clock,
            entropy: Mutex::new(entropy),
            meter: None,
            state: Mutex::new(ReaderState { active, used, store: Some(store) }),
        })
    }

    pub fn vid(&self) -> &str {
        &self.vid
    }

    pub fn set_meter(&mut self, meter: RoleMeter) {
        self.meter = Some(meter);
    }

    pub fn set_windows(&mut self, freshness_window: u64, session_timeout: u64) {
        self.freshness_window = freshness_window;
        self.session_timeout = session_timeout;
    }

    fn persist_used(state: &mut ReaderState, q: &[u8]) -> Result<(), ProtocolError> {
        if let Some(store) = &mut state.store {
            store.set(&format!("used.{}", hex::encode(q)), "1").map_err(store_io)?;
        }
        Ok(())
    }

    // `null` when no session is open, so closing survives a reload of the
    // append-only store.
    fn persist_active(state: &mut ReaderState) -> Result<(), ProtocolError> {
        if let Some(store) = &mut state.store {
            let value = serde_json::to_string(&state.active)
                .map_err(|e| ProtocolError::Transport(e.to_string()))?;
            store.set("active", &value).map_err(store_io)?;
        }
        Ok(())
    }

    /// Open a session: one fresh challenge for one expected presentation.
    /// Refuses while another session is open, so a nonce can never be in
    /// flight twice.
    pub fn new_session(&self, pp_id: &str) -> Result<Challenge, ProtocolError> {
        let _guard = self.meter.as_ref().map(|m| m.guard(Role::Reader));
        self.expire_stale_session()?;
        if !self.keys.contains_key(pp_id) {
            return Err(ProtocolError::UnknownPolicy(pp_id.to_string()));
        }
        let mut state = self.state.lock().expect("reader state lock");
        if state.active.is_some() {
            return Err(ProtocolError::Session("a session is already open".into()));
        }
        let q = loop {
            let mut q = vec![0u8; TOKEN_NONCE_LEN];
            self.entropy.lock().expect("entropy lock").fill(&mut q);
            if !state.used.contains(&q) {
                break q;
            }
        };
        let challenge = Challenge {
            vid: self.vid.clone(),
            q: Bytes(q),
            t: self.clock.now(),
            pp_id: pp_id.to_string(),
        };
        state.active = Some(challenge.clone());
        Self::persist_active(&mut state)?;
        Ok(challenge)
    }

    /// Judge a presented token against the open session. Every call closes
    /// the session; the nonce is retired only once a genuine signature has
    /// been seen on it, so a garbled presentation does not burn the slot
    /// for the real holder.
    pub fn verify_token(&self, token: &Token) -> Verdict {
        let _guard = self.meter.as_ref().map(|m| m.guard(Role::Reader));
        let now = self.clock.now();
        let mut state = self.state.lock().expect("reader state lock");

        if state.used.contains(token.q.as_slice()) {
            Self::close_session(&mut state);
            return Verdict::Reject(RejectReason::NonceReused);
        }
        let Some(challenge) = state.active.clone() else {
            return Verdict::Reject(RejectReason::NoSession);
        };
        Self::close_session(&mut state);

        if token.vid != challenge.vid
            || token.q != challenge.q
            || token.t != challenge.t
            || token.pp_id != challenge.pp_id
        {
            return Verdict::Reject(RejectReason::FieldMismatch);
        }
        let Some(vk) = self.keys.get(&token.pp_id) else {
            return Verdict::Reject(RejectReason::UnknownPolicy);
        };
        let Ok(element) = g1_from(token.sig.as_slice(), "token signature") else {
            return Verdict::Reject(RejectReason::BadSignature);
        };
        if !dsig_vf(vk, &token.message(), &Signature(element)) {
            return Verdict::Reject(RejectReason::BadSignature);
        }

        // Real signature on this nonce: spent from here on, whatever the
        // freshness check says.
        state.used.insert(token.q.to_vec());
        let _ = Self::persist_used(&mut state, token.q.as_slice());

        if now < token.t || now - token.t > self.freshness_window {
            return Verdict::Reject(RejectReason::Stale);
        }
        Verdict::Accept
    }

    fn close_session(state: &mut ReaderState) {
        state.active = None;
        let _ = Self::persist_active(state);
    }

    /// Abandon the open session without retiring its nonce. For when the
    /// holder walks away before presenting: the nonce was never signed
    /// over, and a future session draws a fresh one, so nothing that
    /// could come back later is left standing.
    pub fn abandon_session(&self) {
        let mut state = self.state.lock().expect("reader state lock");
        Self::close_session(&mut state);
    }

    /// Retire the open challenge if it has outlived the session window.
    /// The nonce is burned unseen: it was public, so it can never back an
    /// acceptance later.
    pub fn expire_stale_session(&self) -> Result<(), ProtocolError> {
        let now = self.clock.now();
        let mut state = self.state.lock().expect("reader state lock");
        let expired = state
            .active
            .as_ref()
            .map(|c| now.saturating_sub(c.t) > self.session_timeout)
            .unwrap_or(false);
        if expired {
            let challenge = state.active.take().expect("checked above");
            state.used.insert(challenge.q.to_vec());
            Self::persist_used(&mut state, challenge.q.as_slice())?;
            Self::persist_active(&mut state)?;
        }
        Ok(())
    }

    pub fn has_open_session(&self) -> bool {
        self.state.lock().expect("reader state lock").active.is_some()
    }

    pub fn used_nonce_count(&self) -> usize {
        self.state.lock().expect("reader state lock").used.len()
    }

    /// In-memory copy with the same keys and ledger, for tests that hammer
    /// one session state many times without touching the original.
    pub(crate) fn clone_for_attack(&self, session: Option<Challenge>) -> Reader {
        let state = self.state.lock().expect("reader state lock");
        Reader {
            vid: self.vid.clone(),
            keys: self.keys.clone(),
            freshness_window: self.freshness_window,
            session_timeout: self.session_timeout,
            clock: self.clock.clone(),
            entropy: Mutex::new(EntropySource::from_seed([0x5eu8; 32])),
            meter: None,
            state: Mutex::new(ReaderState {
                active: session,
                used: state.used.clone(),
                store: None,
            }),
        }
    }
}

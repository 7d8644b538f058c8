//! Wire vocabulary: envelopes, payloads, tokens, and the canonical byte
//! strings that get signed.
//!
//! Everything on the wire is a length-prefixed JSON `Envelope` with byte
//! fields base64-encoded. Signed material never goes through JSON: every
//! signature in the protocol covers a canonical tuple encoding built here,
//! so a signature is always over one unambiguous byte string regardless of
//! how the surrounding message was framed.

use std::collections::BTreeMap;
use std::fmt;

use dhp_core::canonical::TupleEncoder;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Byte string that serializes as base64. Used for every binary field in
/// wire payloads so `Vec<Bytes>` and map values need no special casing.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct Bytes(pub Vec<u8>);

impl Bytes {
    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.0.clone()
    }
}

impl From<Vec<u8>> for Bytes {
    fn from(v: Vec<u8>) -> Self {
        Bytes(v)
    }
}

impl From<&[u8]> for Bytes {
    fn from(v: &[u8]) -> Self {
        Bytes(v.to_vec())
    }
}

impl<const N: usize> From<[u8; N]> for Bytes {
    fn from(v: [u8; N]) -> Self {
        Bytes(v.to_vec())
    }
}

impl AsRef<[u8]> for Bytes {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for Bytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bytes({})", hex::encode(&self.0))
    }
}

impl Serialize for Bytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use base64::Engine as _;
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Bytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use base64::Engine as _;
        let text = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(text.as_bytes())
            .map(Bytes)
            .map_err(D::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed message: {0}")]
    Malformed(String),
}

impl WireError {
    fn m(what: impl Into<String>) -> Self {
        WireError::Malformed(what.into())
    }
}

/// Protocol-level failure. The `code` round-trips through error envelopes
/// so a client sees the same variant the server raised.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("integrity failure: {0}")]
    Integrity(String),
    #[error("policy not satisfied: {0}")]
    Policy(String),
    #[error("session error: {0}")]
    Session(String),
    #[error("unknown user: {0}")]
    UnknownUid(String),
    #[error("unknown policy: {0}")]
    UnknownPolicy(String),
    #[error("unknown peer index {0}")]
    UnknownPeer(u32),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("refresh error: {0}")]
    Refresh(String),
    #[error("transport error: {0}")]
    Transport(String),
}

impl ProtocolError {
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::Auth(_) => "auth",
            ProtocolError::Integrity(_) => "integrity",
            ProtocolError::Policy(_) => "policy",
            ProtocolError::Session(_) => "session",
            ProtocolError::UnknownUid(_) => "unknown-uid",
            ProtocolError::UnknownPolicy(_) => "unknown-policy",
            ProtocolError::UnknownPeer(_) => "unknown-peer",
            ProtocolError::BadRequest(_) => "bad-request",
            ProtocolError::Refresh(_) => "refresh",
            ProtocolError::Transport(_) => "transport",
        }
    }

    pub fn from_code(code: &str, detail: String) -> ProtocolError {
        match code {
            "auth" => ProtocolError::Auth(detail),
            "integrity" => ProtocolError::Integrity(detail),
            "policy" => ProtocolError::Policy(detail),
            "session" => ProtocolError::Session(detail),
            "unknown-uid" => ProtocolError::UnknownUid(detail),
            "unknown-policy" => ProtocolError::UnknownPolicy(detail),
            "unknown-peer" => ProtocolError::UnknownPeer(detail.parse().unwrap_or(0)),
            "refresh" => ProtocolError::Refresh(detail),
            "bad-request" => ProtocolError::BadRequest(detail),
            other => ProtocolError::Transport(format!("{other}: {detail}")),
        }
    }
}

impl From<WireError> for ProtocolError {
    fn from(e: WireError) -> Self {
        ProtocolError::BadRequest(e.to_string())
    }
}

/// Message type tags. Replies reuse the request tag with an `-ok` suffix;
/// failures use [`msg::ERROR`] with an [`ErrorReply`] payload.
pub mod msg {
    pub const PING: &str = "ping";
    pub const ENROLL_ROUND1: &str = "enroll-round1";
    pub const ENROLL_FINALIZE: &str = "enroll-finalize";
    pub const ENROLL_DISCARD: &str = "enroll-discard";
    pub const ISSUE_ROUND1: &str = "issue-round1";
    pub const ISSUE_ROUND2: &str = "issue-round2";
    pub const INGEST_PUSH: &str = "ingest-push";
    pub const INGEST_COMPLETE: &str = "ingest-complete";
    pub const INGEST_COMMIT: &str = "ingest-commit";
    pub const INGEST_ABORT: &str = "ingest-abort";
    pub const PEER_SHARE: &str = "peer-share";
    pub const PEER_PENDING: &str = "peer-pending";
    pub const REFRESH_START: &str = "refresh-start";
    pub const REFRESH_DELTA: &str = "refresh-delta";
    pub const REFRESH_APPLY: &str = "refresh-apply";
    pub const CHALLENGE: &str = "challenge";
    pub const PRESENT_TOKEN: &str = "present-token";
    pub const ERROR: &str = "error";

    pub fn ok(request: &str) -> String {
        format!("{request}-ok")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope {
    pub msg_type: String,
    pub session_id: String,
    pub payload: serde_json::Value,
}

impl Envelope {
    pub fn request<T: Serialize>(msg_type: &str, session_id: &str, payload: &T) -> Envelope {
        Envelope {
            msg_type: msg_type.to_string(),
            session_id: session_id.to_string(),
            payload: serde_json::to_value(payload).expect("payload serializes"),
        }
    }

    /// Success reply to `self`, keeping the correlation id.
    pub fn reply<T: Serialize>(&self, payload: &T) -> Envelope {
        Envelope {
            msg_type: msg::ok(&self.msg_type),
            session_id: self.session_id.clone(),
            payload: serde_json::to_value(payload).expect("payload serializes"),
        }
    }

    pub fn error_reply(&self, err: &ProtocolError) -> Envelope {
        Envelope {
            msg_type: msg::ERROR.to_string(),
            session_id: self.session_id.clone(),
            payload: serde_json::to_value(ErrorReply {
                code: err.code().to_string(),
                detail: err.to_string(),
            })
            .expect("payload serializes"),
        }
    }

    pub fn open<T: serde::de::DeserializeOwned>(&self) -> Result<T, WireError> {
        serde_json::from_value(self.payload.clone())
            .map_err(|e| WireError::m(format!("{} payload: {e}", self.msg_type)))
    }

    pub fn is_error(&self) -> bool {
        self.msg_type == msg::ERROR
    }

    /// Client-side unwrap: map error envelopes back to the server's
    /// [`ProtocolError`], insist on the matching `-ok` type otherwise.
    pub fn expect_reply<T: serde::de::DeserializeOwned>(
        &self,
        request_type: &str,
    ) -> Result<T, ProtocolError> {
        if self.is_error() {
            let err: ErrorReply = self.open()?;
            return Err(ProtocolError::from_code(&err.code, err.detail));
        }
        if self.msg_type != msg::ok(request_type) {
            return Err(ProtocolError::Transport(format!(
                "expected {}-ok, got {}",
                request_type, self.msg_type
            )));
        }
        Ok(self.open()?)
    }

    pub fn to_wire(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("envelope serializes")
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Envelope, WireError> {
        serde_json::from_slice(bytes).map_err(|e| WireError::m(format!("envelope: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorReply {
    pub code: String,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PingReq {}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PingResp {
    pub index: u32,
    pub n: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ack {}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OprfRound1Req {
    pub uid: String,
    pub alpha: Bytes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OprfRound1Resp {
    pub index: u32,
    pub eval: Bytes,
    pub nonce: Bytes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnrollFinalizeReq {
    pub uid: String,
    pub pk_c: Bytes,
    pub pk_se: Bytes,
    pub consent: String,
    pub nonces: Vec<Bytes>,
    pub sig_c: Bytes,
    pub sig_se: Bytes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnrollDiscardReq {
    pub uid: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssueRound2Req {
    pub uid: String,
    pub pp_id: String,
    pub beta: Bytes,
    pub nonces: Vec<Bytes>,
    pub sig_c: Bytes,
    pub sig_se: Bytes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssueRound2Resp {
    pub index: u32,
    pub epoch: u64,
    pub partial: Bytes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestPushReq {
    pub uid: String,
    pub record: Bytes,
    pub sig: Bytes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestUidReq {
    pub uid: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeerPendingReq {
    pub uid: String,
    pub requester: u32,
    pub sig: Bytes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeerShareReq {
    pub uid: String,
    pub requester: u32,
    pub nonces: Vec<Bytes>,
    pub sig: Bytes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeerShareResp {
    pub index: u32,
    pub digest: Bytes,
    pub share: Bytes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefreshDeltaReq {
    pub from: u32,
    pub oprf_delta: Bytes,
    pub sig_deltas: BTreeMap<String, Bytes>,
    /// Sender's identity signature over [`refresh_binding`].
    pub sig: Bytes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefreshApplyResp {
    pub epoch: u64,
}

/// Reader challenge: the verifier-chosen fields the token must echo.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub vid: String,
    pub q: Bytes,
    pub t: u64,
    pub pp_id: String,
}

impl Challenge {
    /// The byte string the servers blindly sign and the reader verifies.
    pub fn message(&self) -> Vec<u8> {
        token_message(&self.pp_id, &self.vid, self.q.as_slice(), self.t)
    }
}

pub const TOKEN_NONCE_LEN: usize = 32;
pub const SIG_LEN: usize = 48;

/// Single-use health token. Serialization carries exactly these five
/// fields; nothing user-identifying survives into the token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub pp_id: String,
    pub vid: String,
    pub q: Bytes,
    pub t: u64,
    pub sig: Bytes,
}

impl Token {
    pub fn message(&self) -> Vec<u8> {
        token_message(&self.pp_id, &self.vid, self.q.as_slice(), self.t)
    }

    /// Compact wire form: the canonical tuple of all five fields, with the
    /// 48-byte signature occupying the final slot.
    pub fn to_wire(&self) -> Vec<u8> {
        TupleEncoder::new()
            .push_str(&self.pp_id)
            .push_str(&self.vid)
            .push(self.q.as_slice())
            .push_u64(self.t)
            .push(self.sig.as_slice())
            .finish()
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Token, WireError> {
        let fields = dhp_core::canonical::decode_tuple(bytes)
            .ok_or_else(|| WireError::m("token: not a tuple"))?;
        if fields.len() != 5 {
            return Err(WireError::m(format!(
                "token: {} fields, want 5",
                fields.len()
            )));
        }
        let pp_id = String::from_utf8(fields[0].clone())
            .map_err(|_| WireError::m("token: pp_id not utf-8"))?;
        let vid = String::from_utf8(fields[1].clone())
            .map_err(|_| WireError::m("token: vid not utf-8"))?;
        if fields[2].len() != TOKEN_NONCE_LEN {
            return Err(WireError::m("token: bad nonce length"));
        }
        if fields[3].len() != 8 {
            return Err(WireError::m("token: bad timestamp length"));
        }
        if fields[4].len() != SIG_LEN {
            return Err(WireError::m("token: bad signature length"));
        }
        let mut t_bytes = [0u8; 8];
        t_bytes.copy_from_slice(&fields[3]);
        Ok(Token {
            pp_id,
            vid,
            q: Bytes(fields[2].clone()),
            t: u64::from_be_bytes(t_bytes),
            sig: Bytes(fields[4].clone()),
        })
    }
}

/// Canonical token body: what gets blind-signed during issuance and
/// re-derived by the reader from its own challenge.
pub fn token_message(pp_id: &str, vid: &str, q: &[u8], t: u64) -> Vec<u8> {
    TupleEncoder::new().push_str(pp_id).push_str(vid).push(q).push_u64(t).finish()
}

// Canonical byte strings under signatures. Each has its own leading tag so
// a signature made for one purpose can never be replayed as another.

fn push_nonces(mut enc: TupleEncoder, nonces: &[Bytes]) -> TupleEncoder {
    for nonce in nonces {
        enc = enc.push(nonce.as_slice());
    }
    enc
}

/// Enrolment binding signed by both client key and SE key: ties the fresh
/// keys to the uid, the consent text, and every server's session nonce.
pub fn enrol_binding(
    uid: &str,
    pk_c: &[u8],
    pk_se: &[u8],
    consent: &str,
    nonces: &[Bytes],
) -> Vec<u8> {
    let enc = TupleEncoder::new()
        .push_str("dhp-enrol")
        .push_str(uid)
        .push(pk_c)
        .push(pk_se)
        .push_str(consent);
    push_nonces(enc, nonces).finish()
}

/// Issuance binding signed by both factors: (uid, aux, β) where aux is the
/// policy id plus all server nonces.
pub fn issuance_binding(uid: &str, pp_id: &str, nonces: &[Bytes], beta: &[u8]) -> Vec<u8> {
    let enc = TupleEncoder::new().push_str("dhp-issue").push_str(uid).push_str(pp_id);
    push_nonces(enc, nonces).push(beta).finish()
}

/// Health-authority binding over a pushed record.
pub fn health_binding(uid: &str, record: &[u8]) -> Vec<u8> {
    TupleEncoder::new().push_str("dhp-health").push_str(uid).push(record).finish()
}

/// Peer share release during issuance: the requesting server proves which
/// issuance session (nonce vector) it is acting for.
pub fn peer_share_binding(uid: &str, requester: u32, nonces: &[Bytes]) -> Vec<u8> {
    let enc = TupleEncoder::new()
        .push_str("dhp-peer-share")
        .push_str(uid)
        .push_u64(u64::from(requester));
    push_nonces(enc, nonces).finish()
}

/// Pending-share collection during two-phase ingest.
pub fn peer_pending_binding(uid: &str, requester: u32) -> Vec<u8> {
    TupleEncoder::new()
        .push_str("dhp-ingest")
        .push_str(uid)
        .push_u64(u64::from(requester))
        .finish()
}

/// Refresh delta exchange between peers: binds the sender index to every
/// delta component it is handing over. Map iteration order is the sorted
/// label order, so both sides encode identically.
pub fn refresh_binding(
    from: u32,
    oprf_delta: &[u8],
    sig_deltas: &BTreeMap<String, Bytes>,
) -> Vec<u8> {
    let mut enc = TupleEncoder::new()
        .push_str("dhp-refresh")
        .push_u64(u64::from(from))
        .push(oprf_delta);
    for (label, delta) in sig_deltas {
        enc = enc.push_str(label).push(delta.as_slice());
    }
    enc.finish()
}

/// Key-generation ceremony: proof of possession over a server's public
/// contribution for one signing key.
pub fn pop_binding(label: &str, index: u32, contribution: &[u8]) -> Vec<u8> {
    TupleEncoder::new()
        .push_str("dhp-pop")
        .push_str(label)
        .push_u64(u64::from(index))
        .push(contribution)
        .finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_base64() {
        let b = Bytes(vec![0, 1, 2, 255, 254]);
        let json = serde_json::to_string(&b).unwrap();
        assert_eq!(json, "\"AAEC//4=\"");
        let back: Bytes = serde_json::from_str(&json).unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<Bytes>("\"not base64!!\"").is_err());
    }

    #[test]
    fn envelope_round_trip_and_reply_types() {
        let req = Envelope::request(
            msg::ISSUE_ROUND1,
            "s1",
            &OprfRound1Req {
                uid: "alice".into(),
                alpha: Bytes(vec![9; 48]),
            },
        );
        let bytes = req.to_wire();
        let back = Envelope::from_wire(&bytes).unwrap();
        assert_eq!(back.msg_type, "issue-round1");
        let opened: OprfRound1Req = back.open().unwrap();
        assert_eq!(opened.uid, "alice");

        let resp = back.reply(&OprfRound1Resp {
            index: 2,
            eval: Bytes(vec![1; 48]),
            nonce: Bytes(vec![2; 16]),
        });
        assert_eq!(resp.msg_type, "issue-round1-ok");
        assert_eq!(resp.session_id, "s1");
        let typed: OprfRound1Resp = resp.expect_reply(msg::ISSUE_ROUND1).unwrap();
        assert_eq!(typed.index, 2);
    }

    #[test]
    fn error_envelopes_round_trip_protocol_errors() {
        let req = Envelope::request(msg::ISSUE_ROUND2, "s", &Ack {});
        let err = ProtocolError::Policy("no clause satisfied".into());
        let reply = req.error_reply(&err);
        assert!(reply.is_error());
        let seen = reply
            .expect_reply::<IssueRound2Resp>(msg::ISSUE_ROUND2)
            .unwrap_err();
        assert_eq!(seen.code(), "policy");
        match seen {
            ProtocolError::Policy(detail) => assert!(detail.contains("no clause")),
            other => panic!("wrong variant: {other:?}"),
        }
    }

    #[test]
    fn mismatched_reply_type_is_a_transport_error() {
        let req = Envelope::request(msg::ISSUE_ROUND1, "s", &Ack {});
        let reply = Envelope::request("something-else", "s", &Ack {});
        let err = reply.expect_reply::<Ack>(&req.msg_type).unwrap_err();
        assert_eq!(err.code(), "transport");
    }

    #[test]
    fn token_wire_round_trip() {
        let tok = Token {
            pp_id: "pp-entry".into(),
            vid: "door-7".into(),
            q: Bytes(vec![7; 32]),
            t: 1_700_000_000,
            sig: Bytes(vec![3; 48]),
        };
        let wire = tok.to_wire();
        let back = Token::from_wire(&wire).unwrap();
        assert_eq!(back, tok);

        // Truncation and field-length damage are both caught.
        assert!(Token::from_wire(&wire[..wire.len() - 1]).is_err());
        let short_q = Token {
            q: Bytes(vec![7; 31]),
            ..tok.clone()
        };
        assert!(Token::from_wire(&short_q.to_wire()).is_err());
    }

    #[test]
    fn token_schema_is_exactly_five_fields() {
        let tok = Token {
            pp_id: "pp".into(),
            vid: "v".into(),
            q: Bytes(vec![0; 32]),
            t: 5,
            sig: Bytes(vec![0; 48]),
        };
        let value = serde_json::to_value(&tok).unwrap();
        let keys: Vec<&str> = value.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, ["pp_id", "q", "sig", "t", "vid"]);
    }

    #[test]
    fn challenge_and_token_agree_on_the_signed_message() {
        let ch = Challenge {
            vid: "v".into(),
            q: Bytes(vec![1; 32]),
            t: 42,
            pp_id: "pp".into(),
        };
        let tok = Token {
            pp_id: ch.pp_id.clone(),
            vid: ch.vid.clone(),
            q: ch.q.clone(),
            t: ch.t,
            sig: Bytes(vec![0; 48]),
        };
        assert_eq!(ch.message(), tok.message());
        // Any field change moves the message.
        let other = Challenge {
            t: 43,
            ..ch.clone()
        };
        assert_ne!(ch.message(), other.message());
    }

    #[test]
    fn bindings_are_domain_separated_and_nonce_sensitive() {
        let nonces = vec![Bytes(vec![1; 16]), Bytes(vec![2; 16])];
        let enrol = enrol_binding("u", &[1; 96], &[2; 96], "consent", &nonces);
        let issue = issuance_binding("u", "pp", &nonces, &[3; 48]);
        assert_ne!(enrol, issue);

        let mut swapped = nonces.clone();
        swapped.swap(0, 1);
        assert_ne!(
            issuance_binding("u", "pp", &nonces, &[3; 48]),
            issuance_binding("u", "pp", &swapped, &[3; 48])
        );
        assert_ne!(
            peer_share_binding("u", 1, &nonces),
            peer_share_binding("u", 2, &nonces)
        );
    }
}

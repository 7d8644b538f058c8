//! The user's client. Holds no long-term secrets of its own: the signing
//! key is re-derived from the password through the servers' oblivious PRF
//! every time it is needed, and the second factor never leaves the secure
//! element. What the wallet file remembers is identity, consent text, the
//! SE key handle, and its read-only copy of the policy directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use dhp_core::blindsig::{
    dsig_blind, dsig_blind_with, dsig_comb, dsig_unblind, dsig_vf, sig_sign, PartialSignature,
    VerificationKey,
};
use dhp_core::group::Scalar;
use dhp_core::passauth::{derive_client_keypair, oprf_blind, oprf_finalize, OprfEvaluation};

use crate::codec::{g1_from, g2_from};
use crate::entropy::EntropySource;
use crate::message::{
    enrol_binding, issuance_binding, msg, Ack, Bytes, Challenge, EnrollDiscardReq,
    EnrollFinalizeReq, Envelope, IssueRound2Req, IssueRound2Resp, OprfRound1Req, OprfRound1Resp,
    ProtocolError, Token,
};
use crate::metering::RoleMeter;
use crate::policy::{render_policy, PublicPolicy};
use crate::secure_element::{KeyId, SeError, SecureElement};
use crate::store::Store;
use crate::transcript::Role;
use crate::transport::Endpoint;

const MIN_PASSWORD_CHARS: usize = 8;

/// What the wallet knows about one policy: the human-readable clauses and
/// the key tokens for it must verify under.
pub type PolicyDirectory = BTreeMap<String, (PublicPolicy, VerificationKey)>;

pub struct Wallet {
    uid: String,
    consent: String,
    se: Arc<SecureElement>,
    se_key: Option<KeyId>,
    directory: PolicyDirectory,
    entropy: Mutex<EntropySource>,
    meter: Option<RoleMeter>,
    /// Stand-in for the online breached-password lookup; configurable so
    /// tests can flip the verdict.
    breach_check: Arc<dyn Fn(&str) -> bool + Send + Sync>,
    store: Option<Mutex<Store>>,
    enrolled: bool,
}

fn se_err(e: SeError) -> ProtocolError {
    match e {
        SeError::UnknownKey(_) => ProtocolError::Auth(format!("secure element: {e}")),
        SeError::Storage(_) => ProtocolError::Transport(format!("secure element: {e}")),
    }
}

fn store_err(e: std::io::Error) -> ProtocolError {
    ProtocolError::Transport(format!("wallet storage: {e}"))
}

impl Wallet {
    pub fn new(
        uid: &str,
        consent: &str,
        se: Arc<SecureElement>,
        directory: PolicyDirectory,
        entropy: EntropySource,
    ) -> Wallet {
        Wallet {
            uid: uid.to_string(),
            consent: consent.to_string(),
            se,
            se_key: None,
            directory,
            entropy: Mutex::new(entropy),
            meter: None,
            breach_check: Arc::new(|_| false),
            store: None,
            enrolled: false,
        }
    }

    /// Same wallet, backed by a state file so the CLI can span processes.
    pub fn bootstrap(
        path: impl AsRef<Path>,
        uid: &str,
        consent: &str,
        se: Arc<SecureElement>,
        directory: PolicyDirectory,
        entropy: EntropySource,
    ) -> std::io::Result<Wallet> {
        let mut wallet = Wallet::new(uid, consent, se, directory, entropy);
        let store = Store::open(path)?;
        wallet.store = Some(Mutex::new(store));
        wallet.persist().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(wallet)
    }

    pub fn reopen(
        path: impl AsRef<Path>,
        se: Arc<SecureElement>,
        entropy: EntropySource,
    ) -> std::io::Result<Wallet> {
        let store = Store::open(path)?;
        let invalid = |what: &str| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("wallet file: {what}"))
        };
        let uid = store.get("wallet.uid").ok_or_else(|| invalid("missing uid"))?.to_string();
        let consent = store
            .get("wallet.consent")
            .ok_or_else(|| invalid("missing consent"))?
            .to_string();
        let se_key = store
            .get("wallet.se_key")
            .filter(|v| !v.is_empty())
            .map(|v| KeyId(v.to_string()));
        let enrolled = store.get("wallet.enrolled") == Some("1");

        let mut directory = PolicyDirectory::new();
        let policy_keys: Vec<String> = store
            .keys_with_prefix("directory.")
            .filter(|k| k.ends_with(".policy"))
            .map(str::to_string)
            .collect();
        for key in policy_keys {
            let pp_id = key
                .trim_start_matches("directory.")
                .trim_end_matches(".policy")
                .to_string();
            let policy: PublicPolicy = serde_json::from_str(
                store.get(&key).ok_or_else(|| invalid("missing policy"))?,
            )
            .map_err(|e| invalid(&e.to_string()))?;
            let vk_bytes = store
                .get_bytes(&format!("directory.{pp_id}.vk"))
                .ok_or_else(|| invalid("missing verification key"))?;
            let element = g2_from(&vk_bytes, "verification key")
                .map_err(|e| invalid(&e.to_string()))?;
            directory.insert(
                pp_id.clone(),
                (policy, VerificationKey { policy_label: pp_id, element }),
            );
        }

        Ok(Wallet {
            uid,
            consent,
            se,
            se_key,
            directory,
            entropy: Mutex::new(entropy),
            meter: None,
            breach_check: Arc::new(|_| false),
            store: Some(Mutex::new(store)),
            enrolled,
        })
    }

    fn persist(&self) -> Result<(), ProtocolError> {
        let Some(store) = &self.store else { return Ok(()) };
        let mut store = store.lock().expect("wallet store lock");
        store.set("wallet.uid", &self.uid).map_err(store_err)?;
        store.set("wallet.consent", &self.consent).map_err(store_err)?;
        store
            .set("wallet.se_key", self.se_key.as_ref().map(|k| k.0.as_str()).unwrap_or(""))
            .map_err(store_err)?;
        store
            .set("wallet.enrolled", if self.enrolled { "1" } else { "0" })
            .map_err(store_err)?;
        for (pp_id, (policy, vk)) in &self.directory {
            let json = serde_json::to_string(policy)
                .map_err(|e| ProtocolError::Transport(e.to_string()))?;
            store.set(&format!("directory.{pp_id}.policy"), &json).map_err(store_err)?;
            store
                .set_bytes(&format!("directory.{pp_id}.vk"), &vk.element.to_compressed())
                .map_err(store_err)?;
        }
        Ok(())
    }

    pub fn uid(&self) -> &str {
        &self.uid
    }

    pub fn is_enrolled(&self) -> bool {
        self.enrolled
    }

    pub fn set_meter(&mut self, meter: RoleMeter) {
        self.meter = Some(meter);
    }

    pub fn set_breach_check(&mut self, check: impl Fn(&str) -> bool + Send + Sync + 'static) {
        self.breach_check = Arc::new(check);
    }

    /// Drop the second-factor handle, as if the device were reset. The
    /// password alone must not be enough afterwards.
    pub fn forget_second_factor(&mut self) -> Result<(), ProtocolError> {
        if let Some(key) = self.se_key.take() {
            self.se.remove(&key).map_err(se_err)?;
        }
        self.persist()
    }

    fn fresh_session_id(&self) -> String {
        hex::encode(self.entropy.lock().expect("entropy lock").bytes16())
    }

    fn meter_guard(&self) -> Option<crate::metering::MeterGuard> {
        self.meter.as_ref().map(|m| m.guard(Role::Client))
    }

    /// OPRF round against every server: blind the credentials, collect one
    /// evaluation and one session nonce per server, derive the seed. The
    /// nonce vector comes back ordered by server index.
    fn credential_round(
        &self,
        msg_type: &str,
        password: &str,
        endpoints: &[Arc<dyn Endpoint>],
        session_id: &str,
    ) -> Result<(dhp_core::passauth::DerivedSeed, Vec<Bytes>), ProtocolError> {
        let n = endpoints.len();
        let entropy = self.entropy.lock().expect("entropy lock").bytes32();
        let blind = oprf_blind(&self.uid, password, &entropy);
        let alpha = Bytes(blind.element.to_compressed().to_vec());

        let mut evals = Vec::with_capacity(n);
        let mut nonces = vec![Bytes::default(); n];
        for (i, endpoint) in endpoints.iter().enumerate() {
            let req = Envelope::request(
                msg_type,
                session_id,
                &OprfRound1Req { uid: self.uid.clone(), alpha: alpha.clone() },
            );
            let reply = endpoint.call(req)?;
            let resp: OprfRound1Resp = reply.expect_reply(msg_type)?;
            if resp.index as usize != i + 1 {
                return Err(ProtocolError::Transport(format!(
                    "server {} answered as index {}",
                    i + 1,
                    resp.index
                )));
            }
            evals.push(OprfEvaluation {
                index: resp.index as usize,
                element: g1_from(resp.eval.as_slice(), "oprf evaluation")?,
            });
            nonces[i] = resp.nonce;
        }
        let seed = oprf_finalize(n, &evals, &blind, &self.uid, password)
            .map_err(|e| ProtocolError::Transport(format!("oprf: {e}")))?;
        Ok((seed, nonces))
    }

    /// Register with all n servers. One round derives the password key,
    /// the second delivers both public keys under both signatures. Any
    /// rejection unwinds the others best-effort; there is no usable
    /// partial account.
    pub fn enroll(
        &mut self,
        password: &str,
        endpoints: &[Arc<dyn Endpoint>],
    ) -> Result<(), ProtocolError> {
        let _meter = self.meter_guard();
        if self.enrolled {
            return Err(ProtocolError::BadRequest("wallet already enrolled".into()));
        }
        if password.chars().count() < MIN_PASSWORD_CHARS {
            return Err(ProtocolError::BadRequest(format!(
                "password shorter than {MIN_PASSWORD_CHARS} characters"
            )));
        }
        if (self.breach_check)(password) {
            return Err(ProtocolError::BadRequest(
                "password appears in a known breach".into(),
            ));
        }

        let session_id = self.fresh_session_id();
        let (seed, nonces) = self.credential_round(
            msg::ENROLL_ROUND1,
            password,
            endpoints,
            &session_id,
        )?;
        let (sk_c, pk_c) = derive_client_keypair(&seed);
        let se_entropy = self.entropy.lock().expect("entropy lock").bytes32();
        let (se_key, pk_se) = self.se.generate(se_entropy).map_err(se_err)?;

        let pk_c_bytes = pk_c.0.to_compressed().to_vec();
        let pk_se_bytes = pk_se.0.to_compressed().to_vec();
        let binding =
            enrol_binding(&self.uid, &pk_c_bytes, &pk_se_bytes, &self.consent, &nonces);
        let sig_c = sig_sign(&sk_c, &binding);
        let sig_se = self.se.sign(&se_key, &binding).map_err(se_err)?;

        let finalize = EnrollFinalizeReq {
            uid: self.uid.clone(),
            pk_c: Bytes(pk_c_bytes),
            pk_se: Bytes(pk_se_bytes),
            consent: self.consent.clone(),
            nonces,
            sig_c: Bytes(sig_c.0.to_compressed().to_vec()),
            sig_se: Bytes(sig_se.0.to_compressed().to_vec()),
        };
        for endpoint in endpoints {
            let req = Envelope::request(msg::ENROLL_FINALIZE, &session_id, &finalize);
            let result = endpoint
                .call(req)
                .and_then(|reply| reply.expect_reply::<Ack>(msg::ENROLL_FINALIZE));
            if let Err(e) = result {
                self.discard_enrolment(endpoints, &session_id);
                return Err(e);
            }
        }

        self.se_key = Some(se_key);
        self.enrolled = true;
        self.persist()
    }

    fn discard_enrolment(&self, endpoints: &[Arc<dyn Endpoint>], session_id: &str) {
        let discard = EnrollDiscardReq { uid: self.uid.clone() };
        for endpoint in endpoints {
            let _ = endpoint.call(Envelope::request(msg::ENROLL_DISCARD, session_id, &discard));
        }
    }

    /// Render the policy behind a challenge so the user can decide whether
    /// to reveal that they satisfy it.
    pub fn display_policy(&self, challenge: &Challenge) -> Result<String, ProtocolError> {
        let (policy, _) = self
            .directory
            .get(&challenge.pp_id)
            .ok_or_else(|| ProtocolError::UnknownPolicy(challenge.pp_id.clone()))?;
        Ok(render_policy(policy))
    }

    /// The full issuance flow against a reader challenge: blind the token
    /// body, authenticate with both factors, collect all n partial
    /// signatures, combine, unblind, and check the result locally before
    /// handing it out.
    pub fn acquire_token(
        &self,
        challenge: &Challenge,
        password: &str,
        endpoints: &[Arc<dyn Endpoint>],
    ) -> Result<Token, ProtocolError> {
        self.acquire_token_inner(challenge, password, endpoints, &TokenFlowOptions::honest())
    }

    pub(crate) fn acquire_token_inner(
        &self,
        challenge: &Challenge,
        password: &str,
        endpoints: &[Arc<dyn Endpoint>],
        options: &TokenFlowOptions,
    ) -> Result<Token, ProtocolError> {
        let _meter = self.meter_guard();
        if !self.enrolled {
            return Err(ProtocolError::BadRequest("wallet not enrolled".into()));
        }
        let se_key = self
            .se_key
            .clone()
            .ok_or_else(|| ProtocolError::Auth("no second factor enrolled".into()))?;
        if !self.directory.contains_key(&challenge.pp_id) {
            return Err(ProtocolError::UnknownPolicy(challenge.pp_id.clone()));
        }
        let signing_pp = options.signing_pp_override.as_deref().unwrap_or(&challenge.pp_id);

        let message = challenge.message();
        let (beta, trapdoor) = if options.skip_blinding {
            dsig_blind_with(&message, Scalar::one())
        } else {
            let entropy = self.entropy.lock().expect("entropy lock").bytes32();
            dsig_blind(&message, &entropy)
        };
        let beta_bytes = Bytes(beta.0.to_compressed().to_vec());

        let session_id = self.fresh_session_id();
        let (seed, nonces) =
            self.credential_round(msg::ISSUE_ROUND1, password, endpoints, &session_id)?;
        let (sk_c, _) = derive_client_keypair(&seed);
        let binding =
            issuance_binding(&self.uid, signing_pp, &nonces, beta_bytes.as_slice());
        let sig_c = sig_sign(&sk_c, &binding);
        let sig_se = self.se.sign(&se_key, &binding).map_err(se_err)?;

        let round2 = IssueRound2Req {
            uid: self.uid.clone(),
            pp_id: signing_pp.to_string(),
            beta: beta_bytes,
            nonces,
            sig_c: Bytes(sig_c.0.to_compressed().to_vec()),
            sig_se: Bytes(sig_se.0.to_compressed().to_vec()),
        };
        let n = endpoints.len();
        let mut partials = Vec::with_capacity(n);
        for (i, endpoint) in endpoints.iter().enumerate() {
            let req = Envelope::request(msg::ISSUE_ROUND2, &session_id, &round2);
            let reply = endpoint.call(req)?;
            let resp: IssueRound2Resp = reply.expect_reply(msg::ISSUE_ROUND2)?;
            if resp.index as usize != i + 1 {
                return Err(ProtocolError::Transport(format!(
                    "server {} answered as index {}",
                    i + 1,
                    resp.index
                )));
            }
            partials.push(PartialSignature {
                index: resp.index as usize,
                epoch: resp.epoch,
                element: g1_from(resp.partial.as_slice(), "partial signature")?,
            });
        }

        let blinded_sig =
            dsig_comb(n, &partials).map_err(|e| ProtocolError::Integrity(e.to_string()))?;
        let sig = dsig_unblind(&blinded_sig, &trapdoor);

        if options.verify_locally {
            let (_, vk) = self.directory.get(&challenge.pp_id).expect("checked above");
            if !dsig_vf(vk, &message, &sig) {
                return Err(ProtocolError::Integrity(
                    "combined signature failed local verification".into(),
                ));
            }
        }

        Ok(Token {
            pp_id: challenge.pp_id.clone(),
            vid: challenge.vid.clone(),
            q: challenge.q.clone(),
            t: challenge.t,
            sig: Bytes(sig.0.to_compressed().to_vec()),
        })
    }
}

/// Deviations from the honest flow, for adversarial tests that need the
/// protocol messages without the client-side guardrails.
#[derive(Default)]
pub(crate) struct TokenFlowOptions {
    /// Ask the servers to sign under a different policy's key than the
    /// challenge names.
    pub signing_pp_override: Option<String>,
    /// Run with the blinding exponent fixed to one, exposing the token
    /// body to the servers.
    pub skip_blinding: bool,
    /// Skip the client-side verification of the combined signature.
    pub verify_locally: bool,
}

impl TokenFlowOptions {
    pub(crate) fn honest() -> TokenFlowOptions {
        TokenFlowOptions { signing_pp_override: None, skip_blinding: false, verify_locally: true }
    }
}

//! Shared helpers for the integration tests: record builders with ages
//! relative to a fixed clock, and a hand-rolled client that speaks the
//! wire protocol directly so tests can pause, reorder or corrupt a flow
//! in ways the wallet refuses to.

#![allow(dead_code)]

use std::sync::Arc;

use dhp_core::blindsig::{dsig_blind, sig_sign, BlindingTrapdoor, PartialSignature};
use dhp_core::passauth::{derive_client_keypair, oprf_blind, oprf_finalize, OprfEvaluation};
use dhp_core::group::G1Element;

use dhp_protocol::entropy::EntropySource;
use dhp_protocol::health::{HealthRecord, Recovery, TestEvent, TestResult, Vaccination};
use dhp_protocol::message::{
    enrol_binding, issuance_binding, msg, Ack, Bytes, Challenge, EnrollFinalizeReq,
    IssueRound2Req, IssueRound2Resp, OprfRound1Req, OprfRound1Resp, ProtocolError, Token,
};
use dhp_protocol::secure_element::{KeyId, SecureElement};
use dhp_protocol::transport::Endpoint;

pub const DAY: u64 = 86_400;
pub const HOUR: u64 = 3_600;
pub const NOW: u64 = 1_700_000_000;

pub fn vaccinated_days_ago(now: u64, days: u64) -> HealthRecord {
    HealthRecord {
        vaccinations: vec![Vaccination {
            date: now - days * DAY,
            vaccine_type: "mrna".into(),
            dose: 2,
        }],
        ..HealthRecord::default()
    }
}

pub fn tested_hours_ago(now: u64, hours: u64, result: TestResult) -> HealthRecord {
    HealthRecord {
        tests: vec![TestEvent { date: now - hours * HOUR, result }],
        ..HealthRecord::default()
    }
}

pub fn recovered_days_ago(now: u64, days: u64) -> HealthRecord {
    HealthRecord { recoveries: vec![Recovery { date: now - days * DAY }], ..HealthRecord::default() }
}

/// Raw OPRF round against every server. Returns the derived seed and the
/// per-server session nonces, exactly as the wallet would compute them.
pub fn manual_round1(
    uid: &str,
    password: &str,
    msg_type: &str,
    session_id: &str,
    endpoints: &[Arc<dyn Endpoint>],
    entropy: &mut EntropySource,
) -> Result<(dhp_core::passauth::DerivedSeed, Vec<Bytes>), ProtocolError> {
    let blind = oprf_blind(uid, password, &entropy.bytes32());
    let alpha = Bytes(blind.element.to_compressed().to_vec());
    let mut evals = Vec::new();
    let mut nonces = Vec::new();
    for endpoint in endpoints {
        let reply = endpoint.call(dhp_protocol::message::Envelope::request(
            msg_type,
            session_id,
            &OprfRound1Req { uid: uid.to_string(), alpha: alpha.clone() },
        ))?;
        let resp: OprfRound1Resp = reply.expect_reply(msg_type)?;
        evals.push(OprfEvaluation {
            index: resp.index as usize,
            element: G1Element::from_compressed(
                resp.eval.as_slice().try_into().expect("48-byte evaluation"),
            )
            .expect("valid evaluation point"),
        });
        nonces.push(resp.nonce);
    }
    let seed = oprf_finalize(endpoints.len(), &evals, &blind, uid, password)
        .map_err(|e| ProtocolError::Transport(e.to_string()))?;
    Ok((seed, nonces))
}

/// Enrol a user without a wallet: derive the password key, mint an SE key,
/// sign the binding with both and finalize everywhere.
pub fn manual_enroll(
    uid: &str,
    password: &str,
    consent: &str,
    se: &SecureElement,
    endpoints: &[Arc<dyn Endpoint>],
    entropy: &mut EntropySource,
) -> Result<KeyId, ProtocolError> {
    let sid = hex::encode(entropy.bytes16());
    let (seed, nonces) = manual_round1(uid, password, msg::ENROLL_ROUND1, &sid, endpoints, entropy)?;
    let (sk_c, pk_c) = derive_client_keypair(&seed);
    let (se_key, pk_se) = se
        .generate(entropy.bytes32())
        .map_err(|e| ProtocolError::Transport(e.to_string()))?;
    let pk_c_bytes = pk_c.0.to_compressed().to_vec();
    let pk_se_bytes = pk_se.0.to_compressed().to_vec();
    let binding = enrol_binding(uid, &pk_c_bytes, &pk_se_bytes, consent, &nonces);
    let sig_c = sig_sign(&sk_c, &binding);
    let sig_se = se.sign(&se_key, &binding).map_err(|e| ProtocolError::Transport(e.to_string()))?;
    let finalize = EnrollFinalizeReq {
        uid: uid.to_string(),
        pk_c: Bytes(pk_c_bytes),
        pk_se: Bytes(pk_se_bytes),
        consent: consent.to_string(),
        nonces,
        sig_c: Bytes(sig_c.0.to_compressed().to_vec()),
        sig_se: Bytes(sig_se.0.to_compressed().to_vec()),
    };
    for endpoint in endpoints {
        let reply = endpoint.call(dhp_protocol::message::Envelope::request(
            msg::ENROLL_FINALIZE,
            &sid,
            &finalize,
        ))?;
        let _: Ack = reply.expect_reply(msg::ENROLL_FINALIZE)?;
    }
    Ok(se_key)
}

/// Full wire-level issuance: round 1, round 2 at every server, combine
/// and unblind. The reference the adversarial variants deviate from.
pub fn manual_issue_token(
    uid: &str,
    password: &str,
    se: &SecureElement,
    se_key: &KeyId,
    challenge: &Challenge,
    endpoints: &[Arc<dyn Endpoint>],
    entropy: &mut EntropySource,
) -> Result<Token, ProtocolError> {
    let (partials, trapdoor) =
        manual_issue_partials(uid, password, se, se_key, challenge, endpoints, entropy, || {})?;
    let blinded = dhp_core::blindsig::dsig_comb(endpoints.len(), &partials)
        .map_err(|e| ProtocolError::Transport(e.to_string()))?;
    let sig = dhp_core::blindsig::dsig_unblind(&blinded, &trapdoor);
    Ok(Token {
        pp_id: challenge.pp_id.clone(),
        vid: challenge.vid.clone(),
        q: challenge.q.clone(),
        t: challenge.t,
        sig: Bytes(sig.0.to_compressed().to_vec()),
    })
}

/// Run issuance by hand and call `mid` after the first server has handed
/// over its partial signature. Whatever `mid` does (say, a key refresh)
/// lands between the first partial and the rest.
#[allow(clippy::too_many_arguments)]
pub fn manual_issue_partials(
    uid: &str,
    password: &str,
    se: &SecureElement,
    se_key: &KeyId,
    challenge: &Challenge,
    endpoints: &[Arc<dyn Endpoint>],
    entropy: &mut EntropySource,
    mid: impl FnOnce(),
) -> Result<(Vec<PartialSignature>, BlindingTrapdoor), ProtocolError> {
    let sid = hex::encode(entropy.bytes16());
    let (seed, nonces) = manual_round1(uid, password, msg::ISSUE_ROUND1, &sid, endpoints, entropy)?;
    let (sk_c, _) = derive_client_keypair(&seed);
    let (beta, trapdoor) = dsig_blind(&challenge.message(), &entropy.bytes32());
    let beta_bytes = Bytes(beta.0.to_compressed().to_vec());
    let binding = issuance_binding(uid, &challenge.pp_id, &nonces, beta_bytes.as_slice());
    let sig_c = sig_sign(&sk_c, &binding);
    let sig_se = se
        .sign(se_key, &binding)
        .map_err(|e| ProtocolError::Transport(e.to_string()))?;
    let round2 = IssueRound2Req {
        uid: uid.to_string(),
        pp_id: challenge.pp_id.clone(),
        beta: beta_bytes,
        nonces,
        sig_c: Bytes(sig_c.0.to_compressed().to_vec()),
        sig_se: Bytes(sig_se.0.to_compressed().to_vec()),
    };
    let mut partials = Vec::new();
    let mut mid = Some(mid);
    for endpoint in endpoints {
        let reply = endpoint.call(dhp_protocol::message::Envelope::request(
            msg::ISSUE_ROUND2,
            &sid,
            &round2,
        ))?;
        let resp: IssueRound2Resp = reply.expect_reply(msg::ISSUE_ROUND2)?;
        partials.push(PartialSignature {
            index: resp.index as usize,
            epoch: resp.epoch,
            element: G1Element::from_compressed(
                resp.partial.as_slice().try_into().expect("48-byte partial"),
            )
            .expect("valid partial point"),
        });
        if let Some(f) = mid.take() {
            f();
        }
    }
    Ok((partials, trapdoor))
}

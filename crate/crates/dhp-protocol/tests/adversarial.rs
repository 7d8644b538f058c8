//! The attack harness turned on a live deployment: replay, tampering,
//! forgery by mutation, the linkage game, and the at-rest scan.

mod common;

use std::sync::Arc;

use common::*;
use dhp_protocol::attacks::{
    attack_linkage, attack_replay, attack_tamper, forge_bit_mutations, scan_at_rest,
};
use dhp_protocol::authority::HealthAuthority;
use dhp_protocol::deployment::{Deployment, DeploymentConfig};
use dhp_protocol::message::ProtocolError;
use dhp_protocol::reader::{RejectReason, Verdict};
use dhp_protocol::store::Store;
use dhp_protocol::time::TestClock;

const PW: &str = "horse-battery-staple";
const CONSENT: &str = "I consent to distributed storage of my health record.";

fn test_deployment(seed: u64) -> (Deployment, Arc<TestClock>, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(TestClock::at(NOW));
    let deployment = Deployment::run_with_clock(
        DeploymentConfig::new(3, dir.path().join("dhp")).seeded(seed),
        clock.clone(),
    )
    .unwrap();
    (deployment, clock, dir)
}

fn enrolled_wallet(deployment: &Deployment, uid: &str) -> dhp_protocol::wallet::Wallet {
    let mut wallet = deployment.new_wallet(uid, CONSENT).unwrap();
    wallet.enroll(PW, &deployment.client_endpoints()).unwrap();
    deployment
        .authority
        .push(uid, &vaccinated_days_ago(NOW, 30), &deployment.authority_endpoints())
        .unwrap();
    wallet
}

#[test]
fn replayed_tokens_never_verify_twice() {
    let (deployment, _clock, _dir) = test_deployment(101);
    let wallet = enrolled_wallet(&deployment, "alice");
    let reader = deployment.new_reader("gate-1").unwrap();
    let other = deployment.new_reader("gate-2").unwrap();

    let outcome = attack_replay(&deployment, &wallet, &reader, &other, "pp-vax-180", PW).unwrap();
    assert_eq!(outcome.first, Verdict::Accept);
    assert_eq!(outcome.replay_same_reader, Verdict::Reject(RejectReason::NonceReused));
    assert_eq!(outcome.replay_after_restart, Verdict::Reject(RejectReason::NonceReused));
    assert_eq!(outcome.replay_other_reader, Verdict::Reject(RejectReason::FieldMismatch));
}

#[test]
fn tampered_tokens_are_rejected_for_the_right_reason() {
    let (deployment, _clock, _dir) = test_deployment(102);
    let wallet = enrolled_wallet(&deployment, "alice");
    let reader = deployment.new_reader("gate-1").unwrap();

    let outcome =
        attack_tamper(&deployment, &wallet, &reader, "pp-vax-180", "pp-entry", PW).unwrap();
    assert_eq!(outcome.flipped_sig, Verdict::Reject(RejectReason::BadSignature));
    assert_eq!(outcome.forward_dated, Verdict::Reject(RejectReason::FieldMismatch));
    assert_eq!(outcome.renamed_policy, Verdict::Reject(RejectReason::FieldMismatch));
    // Signed under pp-entry's key, presented against pp-vax-180's: the
    // pairing check fails even though the signature is well formed.
    assert_eq!(outcome.cross_key, Verdict::Reject(RejectReason::BadSignature));
}

#[test]
fn random_bit_flips_never_produce_an_accepting_token() {
    let (deployment, _clock, _dir) = test_deployment(103);
    let wallet = enrolled_wallet(&deployment, "alice");
    let reader = deployment.new_reader("gate-1").unwrap();
    let challenge = reader.new_session("pp-vax-180").unwrap();
    let token = wallet.acquire_token(&challenge, PW, &deployment.client_endpoints()).unwrap();

    let accepted = forge_bit_mutations(&reader, &challenge, &token, 200, 104);
    assert_eq!(accepted, 0);
    // The unmutated token still passes: the harness was judging real
    // presentations, not rigged ones.
    assert_eq!(reader.verify_token(&token), Verdict::Accept);
}

#[test]
fn blinded_issuance_defeats_linkage_and_unblinded_does_not() {
    let (deployment, _clock, _dir) = test_deployment(105);
    let alice = enrolled_wallet(&deployment, "alice");
    let bob = enrolled_wallet(&deployment, "bob");
    let wallets = [&alice, &bob];

    // Smoke-test bounds; the acceptance run uses more trials and the
    // tight interval.
    let blinded = attack_linkage(&deployment, &wallets, "pp-vax-180", PW, 30, true, 1).unwrap();
    assert!(
        blinded.accuracy() > 0.15 && blinded.accuracy() < 0.85,
        "blinded linkage accuracy {}",
        blinded.accuracy()
    );

    let unblinded = attack_linkage(&deployment, &wallets, "pp-vax-180", PW, 10, false, 2).unwrap();
    assert_eq!(unblinded.accuracy(), 1.0, "unblinded issuance must be fully linkable");
}

#[test]
fn server_files_never_hold_the_record_in_the_clear() {
    let (deployment, _clock, dir) = test_deployment(106);
    let wallet = enrolled_wallet(&deployment, "alice");
    let record = vaccinated_days_ago(NOW, 30);
    // The full canonical encoding and a content fragment of it. "mrna"
    // appears nowhere in legitimate server state, so any hit is a leak.
    let needles = vec![record.canonical_bytes(), b"mrna".to_vec()];

    let base = dir.path().join("dhp");
    let after_ingest = scan_at_rest(&base, &needles).unwrap();
    assert_eq!(after_ingest.files_scanned, 3);
    assert!(after_ingest.hits.is_empty(), "hits: {:?}", hit_files(&after_ingest));

    let reader = deployment.new_reader("gate-1").unwrap();
    let (verdict, _) = deployment.run_verification(&wallet, &reader, "pp-vax-180", PW).unwrap();
    assert_eq!(verdict, Verdict::Accept);
    let after_issuance = scan_at_rest(&base, &needles).unwrap();
    assert!(after_issuance.hits.is_empty(), "hits: {:?}", hit_files(&after_issuance));
}

fn hit_files(report: &dhp_protocol::attacks::ScanReport) -> Vec<String> {
    report
        .hits
        .iter()
        .map(|h| format!("{} ({})", h.file.display(), h.encoding))
        .collect()
}

#[test]
fn ingest_requires_the_authoritys_signature() {
    let (deployment, _clock, dir) = test_deployment(107);
    let wallet = enrolled_wallet(&deployment, "alice");

    // An imposter with its own keypair pushes a fabricated record for an
    // enrolled user. Every server must refuse it, and the real record
    // must survive untouched.
    let imposter = HealthAuthority::new([9u8; 32]);
    let forged = vaccinated_days_ago(NOW, 1);
    let err =
        imposter.push("alice", &forged, &deployment.authority_endpoints()).unwrap_err();
    assert!(matches!(err, ProtocolError::Auth(_)), "got {err:?}");

    let reader = deployment.new_reader("gate-1").unwrap();
    let (verdict, _) = deployment.run_verification(&wallet, &reader, "pp-vax-180", PW).unwrap();
    assert_eq!(verdict, Verdict::Accept);

    // No share material for the forged record anywhere.
    let forged_bytes = forged.canonical_bytes();
    for i in 1..=3u32 {
        let store = Store::open(dir.path().join("dhp").join(format!("server-{i}.db"))).unwrap();
        let share = store.get_bytes("health.alice.share").unwrap();
        assert_ne!(share, forged_bytes);
    }
}

//! The protocol must not care how bytes move. Everything that passes
//! in-process must pass over TCP, and a seeded run must produce the same
//! conversation on both transports.

mod common;

use std::sync::Arc;

use common::*;
use dhp_protocol::deployment::{Deployment, DeploymentConfig};
use dhp_protocol::reader::Verdict;
use dhp_protocol::time::TestClock;

const PW: &str = "horse-battery-staple";
const CONSENT: &str = "I consent to distributed storage of my health record.";

/// (from, to, msg_type, payload digest) per transcript entry.
type Trace = Vec<(String, String, String, String)>;

fn journey(deployment: &Deployment) -> (Vec<u8>, Trace) {
    let mut wallet = deployment.new_wallet("alice", CONSENT).unwrap();
    wallet.enroll(PW, &deployment.client_endpoints()).unwrap();
    deployment
        .authority
        .push("alice", &vaccinated_days_ago(NOW, 30), &deployment.authority_endpoints())
        .unwrap();
    let reader = deployment.new_reader("gate-1").unwrap();
    let (verdict, token) =
        deployment.run_verification(&wallet, &reader, "pp-vax-180", PW).unwrap();
    assert_eq!(verdict, Verdict::Accept);
    let trace = deployment
        .transcript
        .entries()
        .iter()
        .map(|e| {
            (
                e.from.to_string(),
                e.to.to_string(),
                e.msg_type.clone(),
                hex::encode(e.payload_digest),
            )
        })
        .collect();
    (token.to_wire(), trace)
}

#[test]
fn tcp_deployment_runs_the_full_journey() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(TestClock::at(NOW));
    let deployment = Deployment::run_with_clock(
        DeploymentConfig::new(3, dir.path().join("dhp")).seeded(77).over_tcp(),
        clock,
    )
    .unwrap();
    journey(&deployment);
}

#[test]
fn tcp_deployment_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(TestClock::at(NOW));
    let base = dir.path().join("dhp");
    {
        let deployment = Deployment::run_with_clock(
            DeploymentConfig::new(3, &base).seeded(78).over_tcp(),
            clock.clone(),
        )
        .unwrap();
        journey(&deployment);
    }
    let deployment = Deployment::reopen_with_clock(&base, clock).unwrap();
    let wallet = deployment.open_wallet("alice").unwrap();
    let reader = deployment.open_reader("gate-1").unwrap();
    let (verdict, _) = deployment.run_verification(&wallet, &reader, "pp-vax-180", PW).unwrap();
    assert_eq!(verdict, Verdict::Accept);
}

#[test]
fn seeded_conversations_match_across_transports() {
    let run = |tcp: bool| {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(TestClock::at(NOW));
        let mut config = DeploymentConfig::new(3, dir.path().join("dhp")).seeded(79);
        if tcp {
            config = config.over_tcp();
        }
        let deployment = Deployment::run_with_clock(config, clock).unwrap();
        journey(&deployment)
    };

    let (token_inproc, trace_inproc) = run(false);
    let (token_tcp, trace_tcp) = run(true);
    assert_eq!(token_inproc, token_tcp, "transport changed the token");
    assert_eq!(trace_inproc, trace_tcp, "transport changed the conversation");
}

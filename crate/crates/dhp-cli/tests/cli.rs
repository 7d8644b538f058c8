//! Drives the built binary the way an operator would: one process per
//! command, state carried only by the deployment directory. Exit codes
//! are the contract under test as much as the output is.

use std::path::Path;
use std::process::{Command, Output};

const PW: &str = "horse-battery-staple";

fn dhp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhp")).args(args).output().expect("spawn dhp")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn expect_code(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}: expected exit {code}\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

/// Setup, enroll and push one vaccinated holder into `dir`.
fn seeded_population(dir: &Path) {
    let d = dir.to_str().unwrap();
    expect_code(&dhp(&["setup", "--dir", d, "--seed", "42"]), 0, "setup");
    expect_code(
        &dhp(&["enroll", "--dir", d, "--uid", "alice", "--password", PW]),
        0,
        "enroll",
    );
    expect_code(
        &dhp(&["push-health", "--dir", d, "--uid", "alice", "--vaccinated-days-ago", "30"]),
        0,
        "push-health",
    );
}

#[test]
fn issue_then_verify_accepts_and_replay_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    seeded_population(dir.path());

    let token = dir.path().join("token.hex");
    let token = token.to_str().unwrap();
    expect_code(
        &dhp(&[
            "issue", "--dir", d, "--uid", "alice", "--password", PW, "--policy", "pp-vax-180",
            "--token-out", token,
        ]),
        0,
        "issue",
    );

    let first = dhp(&["verify", "--dir", d, "--token", token]);
    expect_code(&first, 0, "first verify");
    assert!(stdout(&first).contains("Accept"), "got: {}", stdout(&first));

    // The nonce was burned by the process above; a second process must
    // see that through the reader's file alone.
    let replay = dhp(&["verify", "--dir", d, "--token", token]);
    expect_code(&replay, 1, "replayed verify");
    assert!(stdout(&replay).contains("NonceReused"), "got: {}", stdout(&replay));
}

#[test]
fn wrong_password_fails_without_wedging_the_reader() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    seeded_population(dir.path());

    let token = dir.path().join("token.hex");
    let token = token.to_str().unwrap();
    let issue_args = |pw: &'static str| {
        vec![
            "issue", "--dir", d, "--uid", "alice", "--password", pw, "--policy", "pp-vax-180",
            "--token-out", token,
        ]
    };

    let wrong = dhp(&issue_args("horse-battery-stable"));
    expect_code(&wrong, 1, "issue with wrong password");
    assert!(
        stderr(&wrong).contains("authentication failed"),
        "got: {}",
        stderr(&wrong)
    );

    // The failed attempt must not leave its session holding the reader.
    expect_code(&dhp(&issue_args(PW)), 0, "issue after failed attempt");
    expect_code(&dhp(&["verify", "--dir", d, "--token", token]), 0, "verify");
}

#[test]
fn policy_refusal_exits_nonzero_with_the_policy_named() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    seeded_population(dir.path());

    // Vaccinated 30 days ago, but pp-test-24 wants a fresh negative test.
    let out = dhp(&[
        "issue", "--dir", d, "--uid", "alice", "--password", PW, "--policy", "pp-test-24",
        "--token-out", dir.path().join("t.hex").to_str().unwrap(),
    ]);
    expect_code(&out, 1, "issue against unmet policy");
    assert!(stderr(&out).contains("policy"), "got: {}", stderr(&out));
}

#[test]
fn scan_is_clean_for_record_bytes_and_dirty_for_planted_ones() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    seeded_population(dir.path());

    let clean = dhp(&["scan", "--dir", d, "--contains", "mrna", "--contains", PW]);
    expect_code(&clean, 0, "scan of honest deployment");
    assert!(stdout(&clean).contains("no needle found"), "got: {}", stdout(&clean));

    // Plant a needle to prove the scanner can actually see one.
    let server1 = dir.path().join("server-1.db");
    let mut bytes = std::fs::read(&server1).unwrap();
    bytes.extend_from_slice(b"leak.test = mrna\n");
    std::fs::write(&server1, bytes).unwrap();
    expect_code(&dhp(&["scan", "--dir", d, "--contains", "mrna"]), 1, "scan with planted leak");
}

#[test]
fn attack_commands_report_defenses_held() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    seeded_population(dir.path());
    expect_code(&dhp(&["enroll", "--dir", d, "--uid", "bob", "--password", PW]), 0, "enroll bob");
    expect_code(
        &dhp(&["push-health", "--dir", d, "--uid", "bob", "--vaccinated-days-ago", "10"]),
        0,
        "push bob",
    );

    let replay = dhp(&["attack", "replay", "--dir", d, "--uid", "alice", "--password", PW]);
    expect_code(&replay, 0, "attack replay");
    assert!(stdout(&replay).contains("defenses held"), "got: {}", stdout(&replay));

    let tamper = dhp(&["attack", "tamper", "--dir", d, "--uid", "alice", "--password", PW]);
    expect_code(&tamper, 0, "attack tamper");
    assert!(stdout(&tamper).contains("defenses held"), "got: {}", stdout(&tamper));

    let linkage = dhp(&[
        "attack", "linkage", "--dir", d, "--uid", "alice", "--uid", "bob", "--password", PW,
        "--trials", "10", "--seed", "7",
    ]);
    expect_code(&linkage, 0, "attack linkage");
    assert!(stdout(&linkage).contains("unlinkability held"), "got: {}", stdout(&linkage));
}

#[test]
fn refresh_keeps_old_tokens_and_sessions_valid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    seeded_population(dir.path());

    let token = dir.path().join("token.hex");
    let token = token.to_str().unwrap();
    expect_code(
        &dhp(&[
            "issue", "--dir", d, "--uid", "alice", "--password", PW, "--policy", "pp-vax-180",
            "--token-out", token,
        ]),
        0,
        "issue",
    );
    expect_code(&dhp(&["refresh", "--dir", d]), 0, "refresh");
    expect_code(&dhp(&["verify", "--dir", d, "--token", token]), 0, "verify after refresh");
}

#[test]
fn demo_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dhp(&["demo", "--dir", dir.path().join("demo").to_str().unwrap(), "--seed", "5"]);
    expect_code(&out, 0, "demo");
    let text = stdout(&out);
    assert!(text.contains("Accept"), "got: {text}");
    assert!(text.contains("single-use guarantee held"), "got: {text}");
}

#[test]
fn record_json_round_trips_through_issuance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    expect_code(&dhp(&["setup", "--dir", d]), 0, "setup");
    expect_code(&dhp(&["enroll", "--dir", d, "--uid", "carol", "--password", PW]), 0, "enroll");

    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap()
        .as_secs();
    let record = format!(
        r#"{{"vaccinations":[],"tests":[{{"date":{},"result":"negative"}}],"recoveries":[]}}"#,
        now - 3600
    );
    expect_code(
        &dhp(&["push-health", "--dir", d, "--uid", "carol", "--record-json", &record]),
        0,
        "push json record",
    );
    expect_code(
        &dhp(&[
            "issue", "--dir", d, "--uid", "carol", "--password", PW, "--policy", "pp-test-24",
            "--token-out", dir.path().join("t.hex").to_str().unwrap(),
        ]),
        0,
        "issue against json record",
    );
}

#[test]
fn usage_and_operational_errors_use_distinct_exit_codes() {
    // Missing required arguments: clap's usage error.
    let usage = dhp(&["issue"]);
    expect_code(&usage, 2, "missing required args");

    // A directory with no deployment in it: operational error.
    let dir = tempfile::tempdir().unwrap();
    let out = dhp(&["policies", "--dir", dir.path().to_str().unwrap()]);
    expect_code(&out, 1, "no deployment");
    assert!(stderr(&out).contains("no deployment"), "got: {}", stderr(&out));

    // Enrolling twice under one uid must fail cleanly.
    let d = dir.path().to_str().unwrap();
    expect_code(&dhp(&["setup", "--dir", d]), 0, "setup");
    expect_code(&dhp(&["enroll", "--dir", d, "--uid", "dave", "--password", PW]), 0, "enroll");
    let again = dhp(&["enroll", "--dir", d, "--uid", "dave", "--password", PW]);
    expect_code(&again, 1, "second enroll");

    // An empty record is refused before it touches the servers.
    let empty = dhp(&["push-health", "--dir", d, "--uid", "dave"]);
    expect_code(&empty, 1, "empty record");
    assert!(stderr(&empty).contains("empty"), "got: {}", stderr(&empty));
}

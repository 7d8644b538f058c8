//! Command line front end. Every invocation reopens the deployment from
//! its directory, does one thing, and exits: state lives in the component
//! files, not in the process.
//!
//! Exit codes: 0 when the requested outcome happened (token accepted,
//! defenses held, scan clean), 1 when it did not or something failed
//! operationally, 2 for usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use dhp_protocol::attacks::{attack_linkage, attack_replay, attack_tamper, scan_at_rest};
use dhp_protocol::deployment::{Deployment, DeploymentConfig};
use dhp_protocol::health::{HealthRecord, Recovery, TestEvent, TestResult, Vaccination};
use dhp_protocol::message::Token;
use dhp_protocol::policy::render_policy;
use dhp_protocol::reader::{Reader, Verdict};

const DAY: u64 = 86_400;
const HOUR: u64 = 3_600;
const DEFAULT_CONSENT: &str =
    "I consent to my health record being stored as shares across the issuer servers.";

#[derive(Parser)]
#[command(
    name = "dhp",
    version,
    about = "Digital health passport: distributed issuance, single-use tokens, shared records"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the key ceremony and create a deployment directory.
    Setup {
        #[arg(long)]
        dir: PathBuf,
        /// Number of issuer servers.
        #[arg(long, default_value_t = 3)]
        servers: u32,
        /// Seed all randomness for a reproducible deployment.
        #[arg(long)]
        seed: Option<u64>,
        /// Serve over local TCP sockets instead of in-process calls.
        #[arg(long)]
        tcp: bool,
    },
    /// Enrol a holder: password-derived key plus device second factor.
    Enroll {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        uid: String,
        #[arg(long)]
        password: String,
        #[arg(long, default_value = DEFAULT_CONSENT)]
        consent: String,
    },
    /// Push a health record for an enrolled holder, as the health
    /// authority. The record is split into shares before it reaches disk.
    PushHealth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        uid: String,
        /// Add a vaccination this many days old.
        #[arg(long)]
        vaccinated_days_ago: Option<u64>,
        #[arg(long, default_value = "mrna")]
        vaccine_type: String,
        #[arg(long, default_value_t = 2)]
        dose: u32,
        /// Add a test result this many hours old (negative unless --positive).
        #[arg(long)]
        tested_hours_ago: Option<u64>,
        #[arg(long)]
        positive: bool,
        /// Add a recovery this many days old.
        #[arg(long)]
        recovered_days_ago: Option<u64>,
        /// Full record as JSON; overrides the individual flags.
        #[arg(long)]
        record_json: Option<String>,
    },
    /// List the policies this deployment can issue tokens for.
    Policies {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Open a reader session and acquire a single-use token for it. The
    /// session stays open for a later `verify`.
    Issue {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        uid: String,
        #[arg(long)]
        password: String,
        #[arg(long)]
        policy: String,
        #[arg(long, default_value = "gate-1")]
        reader: String,
        /// File the token is written to, as hex.
        #[arg(long)]
        token_out: PathBuf,
    },
    /// Present a token file to a reader and print the verdict.
    Verify {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "gate-1")]
        reader: String,
        #[arg(long)]
        token: PathBuf,
    },
    /// Proactively re-share every signing key. Verification keys and
    /// issued tokens are unaffected.
    Refresh {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Full walkthrough in a fresh directory: setup, enrol, push, issue,
    /// verify, replay.
    Demo {
        /// Where to create the demo deployment; a fresh temp path if omitted.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Scan the server files for byte strings that must never rest there.
    Scan {
        #[arg(long)]
        dir: PathBuf,
        /// Needle to look for (raw, hex and base64 forms); repeatable.
        #[arg(long, required = true)]
        contains: Vec<String>,
    },
    /// Run an attack against the deployment and report whether the
    /// defenses held.
    #[command(subcommand)]
    Attack(AttackCommand),
}

#[derive(Subcommand)]
enum AttackCommand {
    /// Acquire one token honestly, then replay it: same reader, restarted
    /// reader, different reader.
    Replay {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        uid: String,
        #[arg(long)]
        password: String,
        #[arg(long, default_value = "pp-entry")]
        policy: String,
    },
    /// Tamper with a genuine token: flip signature bits, forward-date it,
    /// rename the policy, substitute another policy's key.
    Tamper {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        uid: String,
        #[arg(long)]
        password: String,
        #[arg(long, default_value = "pp-entry")]
        policy: String,
        #[arg(long, default_value = "pp-vax-180")]
        other_policy: String,
    },
    /// The linkage game: colluding servers try to match issuances to
    /// presentations across several holders.
    Linkage {
        #[arg(long)]
        dir: PathBuf,
        /// Enrolled holders taking part; repeat for each (at least two).
        #[arg(long = "uid", required = true, num_args = 1..)]
        uids: Vec<String>,
        #[arg(long)]
        password: String,
        #[arg(long, default_value = "pp-entry")]
        policy: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Skip blinding, demonstrating why it exists.
        #[arg(long)]
        unblinded: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;

fn run(command: Command) -> CliResult {
    match command {
        Command::Setup { dir, servers, seed, tcp } => setup(dir, servers, seed, tcp),
        Command::Enroll { dir, uid, password, consent } => enroll(dir, uid, password, consent),
        Command::PushHealth {
            dir,
            uid,
            vaccinated_days_ago,
            vaccine_type,
            dose,
            tested_hours_ago,
            positive,
            recovered_days_ago,
            record_json,
        } => push_health(
            dir,
            uid,
            vaccinated_days_ago,
            vaccine_type,
            dose,
            tested_hours_ago,
            positive,
            recovered_days_ago,
            record_json,
        ),
        Command::Policies { dir } => policies(dir),
        Command::Issue { dir, uid, password, policy, reader, token_out } => {
            issue(dir, uid, password, policy, reader, token_out)
        }
        Command::Verify { dir, reader, token } => verify(dir, reader, token),
        Command::Refresh { dir } => refresh(dir),
        Command::Demo { dir, seed } => demo(dir, seed),
        Command::Scan { dir, contains } => scan(dir, contains),
        Command::Attack(attack) => match attack {
            AttackCommand::Replay { dir, uid, password, policy } => {
                attack_replay_cmd(dir, uid, password, policy)
            }
            AttackCommand::Tamper { dir, uid, password, policy, other_policy } => {
                attack_tamper_cmd(dir, uid, password, policy, other_policy)
            }
            AttackCommand::Linkage { dir, uids, password, policy, trials, unblinded, seed } => {
                attack_linkage_cmd(dir, uids, password, policy, trials, unblinded, seed)
            }
        },
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).expect("clock before 1970").as_secs()
}

fn open_deployment(dir: &Path) -> Result<Deployment, Box<dyn std::error::Error>> {
    if !dir.join("deployment.db").exists() {
        return Err(format!("no deployment at {}; run `dhp setup --dir ...` first", dir.display())
            .into());
    }
    Ok(Deployment::reopen(dir)?)
}

fn setup(dir: PathBuf, servers: u32, seed: Option<u64>, tcp: bool) -> CliResult {
    if dir.join("deployment.db").exists() {
        return Err(format!("{} already holds a deployment", dir.display()).into());
    }
    let mut config = DeploymentConfig::new(servers, &dir);
    if let Some(seed) = seed {
        config = config.seeded(seed);
    }
    if tcp {
        config = config.over_tcp();
    }
    let deployment = Deployment::run(config)?;
    println!(
        "deployment ready: {} servers, {} policies, at {}",
        deployment.n(),
        deployment.policies().len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn enroll(dir: PathBuf, uid: String, password: String, consent: String) -> CliResult {
    let deployment = open_deployment(&dir)?;
    if dir.join(format!("wallet-{uid}.db")).exists() {
        return Err(format!("a wallet for {uid} already exists").into());
    }
    let mut wallet = deployment.new_wallet(&uid, &consent)?;
    wallet.enroll(&password, &deployment.client_endpoints())?;
    println!("enrolled {uid}");
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn push_health(
    dir: PathBuf,
    uid: String,
    vaccinated_days_ago: Option<u64>,
    vaccine_type: String,
    dose: u32,
    tested_hours_ago: Option<u64>,
    positive: bool,
    recovered_days_ago: Option<u64>,
    record_json: Option<String>,
) -> CliResult {
    let record = if let Some(json) = record_json {
        serde_json::from_str::<HealthRecord>(&json)?
    } else {
        let now = now();
        let mut record = HealthRecord::default();
        if let Some(days) = vaccinated_days_ago {
            record.vaccinations.push(Vaccination {
                date: now - days * DAY,
                vaccine_type: vaccine_type.clone(),
                dose,
            });
        }
        if let Some(hours) = tested_hours_ago {
            record.tests.push(TestEvent {
                date: now - hours * HOUR,
                result: if positive { TestResult::Positive } else { TestResult::Negative },
            });
        }
        if let Some(days) = recovered_days_ago {
            record.recoveries.push(Recovery { date: now - days * DAY });
        }
        record
    };
    if record.is_empty() {
        return Err("the record is empty; pass at least one event flag or --record-json".into());
    }
    let deployment = open_deployment(&dir)?;
    deployment.authority.push(&uid, &record, &deployment.authority_endpoints())?;
    println!("record stored for {uid} (as {} shares per server file)", deployment.n());
    Ok(ExitCode::SUCCESS)
}

fn policies(dir: PathBuf) -> CliResult {
    let deployment = open_deployment(&dir)?;
    for policy in deployment.policies() {
        println!("{}", render_policy(policy));
    }
    Ok(ExitCode::SUCCESS)
}

/// Open the named reader, creating it on first use.
fn reader(deployment: &Deployment, dir: &Path, vid: &str) -> std::io::Result<Reader> {
    if dir.join(format!("reader-{vid}.db")).exists() {
        deployment.open_reader(vid)
    } else {
        deployment.new_reader(vid)
    }
}

fn issue(
    dir: PathBuf,
    uid: String,
    password: String,
    policy: String,
    reader_vid: String,
    token_out: PathBuf,
) -> CliResult {
    let deployment = open_deployment(&dir)?;
    let wallet = deployment.open_wallet(&uid)?;
    let reader = reader(&deployment, &dir, &reader_vid)?;
    let challenge = reader.new_session(&policy)?;
    match wallet.acquire_token(&challenge, &password, &deployment.client_endpoints()) {
        Ok(token) => {
            std::fs::write(&token_out, format!("{}\n", hex::encode(token.to_wire())))?;
            println!(
                "token for {policy} written to {} (present it to reader {reader_vid} within its freshness window)",
                token_out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            reader.abandon_session();
            Err(e.into())
        }
    }
}

fn verify(dir: PathBuf, reader_vid: String, token_path: PathBuf) -> CliResult {
    let deployment = open_deployment(&dir)?;
    let reader = reader(&deployment, &dir, &reader_vid)?;
    let hex_text = std::fs::read_to_string(&token_path)?;
    let wire = hex::decode(hex_text.trim())?;
    let token = Token::from_wire(&wire)?;
    let verdict = reader.verify_token(&token);
    println!("{verdict}");
    Ok(if verdict.is_accept() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn refresh(dir: PathBuf) -> CliResult {
    let deployment = open_deployment(&dir)?;
    deployment.refresh()?;
    println!("all signing key shares re-randomized; verification keys unchanged");
    Ok(ExitCode::SUCCESS)
}

fn demo(dir: Option<PathBuf>, seed: Option<u64>) -> CliResult {
    let dir = dir.unwrap_or_else(|| {
        std::env::temp_dir().join(format!("dhp-demo-{}-{}", std::process::id(), now()))
    });
    let mut config = DeploymentConfig::new(3, &dir);
    if let Some(seed) = seed {
        config = config.seeded(seed);
    }
    let deployment = Deployment::run(config)?;
    println!("deployment: 3 servers at {}", dir.display());

    let mut wallet = deployment.new_wallet("alice", DEFAULT_CONSENT)?;
    wallet.enroll("correct-horse-battery", &deployment.client_endpoints())?;
    println!("enrolled holder: alice (password + device second factor)");

    let mut record = HealthRecord::default();
    record.vaccinations.push(Vaccination {
        date: now() - 30 * DAY,
        vaccine_type: "mrna".into(),
        dose: 2,
    });
    deployment.authority.push("alice", &record, &deployment.authority_endpoints())?;
    println!("health authority pushed a 30-day-old vaccination record");

    let reader = deployment.new_reader("gate-1")?;
    let (verdict, token) =
        deployment.run_verification(&wallet, &reader, "pp-vax-180", "correct-horse-battery")?;
    println!("reader gate-1 verdict on a fresh token: {verdict}");

    let replay = reader.verify_token(&token);
    println!("same token presented again: {replay}");

    let held = verdict == Verdict::Accept && replay != Verdict::Accept;
    println!("single-use guarantee {}", if held { "held" } else { "VIOLATED" });
    Ok(if held { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn scan(dir: PathBuf, contains: Vec<String>) -> CliResult {
    let needles: Vec<Vec<u8>> = contains.iter().map(|s| s.as_bytes().to_vec()).collect();
    let report = scan_at_rest(&dir, &needles)?;
    if report.files_scanned == 0 {
        return Err(format!("no server files under {}", dir.display()).into());
    }
    if report.hits.is_empty() {
        println!("{} server files scanned, no needle found at rest", report.files_scanned);
        Ok(ExitCode::SUCCESS)
    } else {
        for hit in &report.hits {
            println!("found ({}) in {}", hit.encoding, hit.file.display());
        }
        Ok(ExitCode::from(1))
    }
}

fn attack_replay_cmd(dir: PathBuf, uid: String, password: String, policy: String) -> CliResult {
    let deployment = open_deployment(&dir)?;
    let wallet = deployment.open_wallet(&uid)?;
    let reader = deployment.new_reader("attack-replay-a")?;
    let other = deployment.new_reader("attack-replay-b")?;
    let outcome = attack_replay(&deployment, &wallet, &reader, &other, &policy, &password)?;
    println!("first presentation:      {}", outcome.first);
    println!("replay, same reader:     {}", outcome.replay_same_reader);
    println!("replay, restarted:       {}", outcome.replay_after_restart);
    println!("replay, other reader:    {}", outcome.replay_other_reader);
    let held = outcome.first == Verdict::Accept
        && outcome.replay_same_reader != Verdict::Accept
        && outcome.replay_after_restart != Verdict::Accept
        && outcome.replay_other_reader != Verdict::Accept;
    println!("defenses {}", if held { "held" } else { "VIOLATED" });
    Ok(if held { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn attack_tamper_cmd(
    dir: PathBuf,
    uid: String,
    password: String,
    policy: String,
    other_policy: String,
) -> CliResult {
    let deployment = open_deployment(&dir)?;
    let wallet = deployment.open_wallet(&uid)?;
    let reader = deployment.new_reader("attack-tamper")?;
    let outcome = attack_tamper(&deployment, &wallet, &reader, &policy, &other_policy, &password)?;
    println!("signature bit flipped:   {}", outcome.flipped_sig);
    println!("timestamp forward-dated: {}", outcome.forward_dated);
    println!("policy renamed:          {}", outcome.renamed_policy);
    println!("cross-policy key used:   {}", outcome.cross_key);
    let held = [
        &outcome.flipped_sig,
        &outcome.forward_dated,
        &outcome.renamed_policy,
        &outcome.cross_key,
    ]
    .iter()
    .all(|v| **v != Verdict::Accept);
    println!("defenses {}", if held { "held" } else { "VIOLATED" });
    Ok(if held { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn attack_linkage_cmd(
    dir: PathBuf,
    uids: Vec<String>,
    password: String,
    policy: String,
    trials: usize,
    unblinded: bool,
    seed: u64,
) -> CliResult {
    if uids.len() < 2 {
        return Err("linkage needs at least two holders (--uid a --uid b)".into());
    }
    let deployment = open_deployment(&dir)?;
    let wallets: Vec<_> =
        uids.iter().map(|uid| deployment.open_wallet(uid)).collect::<Result<_, _>>()?;
    let refs: Vec<&_> = wallets.iter().collect();
    let outcome =
        attack_linkage(&deployment, &refs, &policy, &password, trials, !unblinded, seed)?;
    println!(
        "colluding servers matched {}/{} rounds ({:.0}% accuracy, chance is {:.0}%)",
        outcome.correct,
        outcome.trials,
        outcome.accuracy() * 100.0,
        100.0 / factorial_guess_rate(uids.len())
    );
    if unblinded {
        println!("without blinding every issuance is linkable; this run is the demonstration");
        Ok(ExitCode::SUCCESS)
    } else {
        let held = outcome.accuracy() < 0.8;
        println!("unlinkability {}", if held { "held" } else { "VIOLATED" });
        Ok(if held { ExitCode::SUCCESS } else { ExitCode::from(1) })
    }
}

/// `users!` as f64: the chance of guessing a full permutation is 1/users!.
fn factorial_guess_rate(users: usize) -> f64 {
    (1..=users).product::<usize>() as f64
}

//! Adversarial experiments against a live deployment.
//!
//! Each function plays a concrete attacker: a holder replaying a spent
//! token, a forger mutating bits, colluding servers trying to link the
//! tokens they issued to the users they issued them to, and an auditor
//! grepping the servers' files for health data. They return measured
//! outcomes; the tests assert what those outcomes must be.

use std::path::{Path, PathBuf};

use dhp_core::blindsig::{dsig_comb, hash_to_group, PartialSignature, VerificationKey};
use dhp_core::group::{pairing_eq, G2Element};

use crate::codec::g1_from;
use crate::deployment::Deployment;
use crate::entropy::EntropySource;
use crate::message::{msg, Bytes, Challenge, IssueRound2Req, IssueRound2Resp, ProtocolError, Token, TOKEN_NONCE_LEN};
use crate::reader::{Reader, Verdict};
use crate::transcript::{Role, TranscriptEntry};
use crate::wallet::{TokenFlowOptions, Wallet};

/// Replay a spent token: at the same reader, at the same reader after a
/// power cycle, and at a different reader.
pub struct ReplayOutcome {
    pub first: Verdict,
    pub replay_same_reader: Verdict,
    pub replay_after_restart: Verdict,
    pub replay_other_reader: Verdict,
}

pub fn attack_replay(
    deployment: &Deployment,
    wallet: &Wallet,
    reader: &Reader,
    other_reader: &Reader,
    pp_id: &str,
    password: &str,
) -> Result<ReplayOutcome, ProtocolError> {
    let (first, token) = deployment.run_verification(wallet, reader, pp_id, password)?;

    let replay_same_reader = reader.verify_token(&token);

    let restarted = deployment
        .open_reader(reader.vid())
        .map_err(|e| ProtocolError::Transport(e.to_string()))?;
    let replay_after_restart = restarted.verify_token(&token);

    other_reader.new_session(pp_id)?;
    let replay_other_reader = other_reader.verify_token(&token);

    Ok(ReplayOutcome { first, replay_same_reader, replay_after_restart, replay_other_reader })
}

/// Targeted tampering: one flipped signature bit, a forward-dated
/// timestamp, a renamed policy, and servers asked to sign under a
/// different policy's key than the one the reader will check.
pub struct TamperOutcome {
    pub flipped_sig: Verdict,
    pub forward_dated: Verdict,
    pub renamed_policy: Verdict,
    pub cross_key: Verdict,
}

pub fn attack_tamper(
    deployment: &Deployment,
    wallet: &Wallet,
    reader: &Reader,
    pp_a: &str,
    pp_b: &str,
    password: &str,
) -> Result<TamperOutcome, ProtocolError> {
    let endpoints = deployment.client_endpoints();

    let challenge = reader.new_session(pp_a)?;
    let mut token = wallet.acquire_token(&challenge, password, &endpoints)?;
    token.sig.0[17] ^= 0x40;
    let flipped_sig = reader.verify_token(&token);

    let challenge = reader.new_session(pp_a)?;
    let mut token = wallet.acquire_token(&challenge, password, &endpoints)?;
    token.t += 1;
    let forward_dated = reader.verify_token(&token);

    let challenge = reader.new_session(pp_a)?;
    let mut token = wallet.acquire_token(&challenge, password, &endpoints)?;
    token.pp_id = pp_b.to_string();
    let renamed_policy = reader.verify_token(&token);

    // Field-perfect token, but the partials came from policy B's key
    // shares. Accepting it would mean one policy's signers can speak for
    // another.
    let challenge = reader.new_session(pp_a)?;
    let options = TokenFlowOptions {
        signing_pp_override: Some(pp_b.to_string()),
        skip_blinding: false,
        verify_locally: false,
    };
    let token = wallet.acquire_token_inner(&challenge, password, &endpoints, &options)?;
    let cross_key = reader.verify_token(&token);

    Ok(TamperOutcome { flipped_sig, forward_dated, renamed_policy, cross_key })
}

/// Flip single bits of a valid token's wire encoding and count how many
/// mutants any reader accepts. Every mutant faces a fresh reader holding
/// the token's own challenge, the most forgiving position possible.
pub fn forge_bit_mutations(
    reader: &Reader,
    challenge: &Challenge,
    token: &Token,
    trials: usize,
    seed: u64,
) -> usize {
    let wire = token.to_wire();
    let mut entropy = EntropySource::from_u64(seed);
    let mut accepted = 0;
    for _ in 0..trials {
        let mut mutant = wire.clone();
        let mut pick = [0u8; 8];
        entropy.fill(&mut pick);
        let bit = (u64::from_be_bytes(pick) as usize) % (mutant.len() * 8);
        mutant[bit / 8] ^= 1 << (bit % 8);
        let Ok(parsed) = Token::from_wire(&mutant) else {
            continue;
        };
        let clone = reader.clone_for_attack(Some(challenge.clone()));
        if clone.verify_token(&parsed).is_accept() {
            accepted += 1;
        }
    }
    accepted
}

/// What colluding servers saw of one issuance: who asked, the blinded
/// element they signed, and the blinded signature their partials combine
/// to.
struct IssuanceView {
    uid: String,
    beta: Vec<u8>,
    blinded_sig: Vec<u8>,
}

fn issuance_views(entries: &[TranscriptEntry], n: usize) -> Result<Vec<IssuanceView>, ProtocolError> {
    let mut requests = Vec::new();
    let mut partials = Vec::new();
    for e in entries {
        if e.msg_type == msg::ISSUE_ROUND2 && e.to == Role::Server(1) {
            let req: IssueRound2Req = serde_json::from_value(e.payload.clone())
                .map_err(|err| ProtocolError::Transport(err.to_string()))?;
            requests.push((req.uid, req.beta.to_vec()));
        }
        if e.msg_type == msg::ok(msg::ISSUE_ROUND2) {
            let resp: IssueRound2Resp = serde_json::from_value(e.payload.clone())
                .map_err(|err| ProtocolError::Transport(err.to_string()))?;
            partials.push(PartialSignature {
                index: resp.index as usize,
                epoch: resp.epoch,
                element: g1_from(resp.partial.as_slice(), "partial signature")?,
            });
        }
    }
    if partials.len() != requests.len() * n {
        return Err(ProtocolError::Transport(format!(
            "expected {} partials for {} issuances, saw {}",
            requests.len() * n,
            requests.len(),
            partials.len()
        )));
    }
    requests
        .into_iter()
        .zip(partials.chunks(n))
        .map(|((uid, beta), chunk)| {
            let combined =
                dsig_comb(n, chunk).map_err(|e| ProtocolError::Transport(e.to_string()))?;
            Ok(IssuanceView { uid, beta, blinded_sig: combined.0.to_compressed().to_vec() })
        })
        .collect()
}

/// True if the issuance view provably produced this token. All three
/// checks exploit a missing or trivial blinding exponent; against honest
/// blinding none of them can fire.
fn view_matches_token(view: &IssuanceView, token: &Token, vk: &VerificationKey) -> bool {
    let hashed = hash_to_group(&token.message()).to_compressed().to_vec();
    if view.beta == hashed || view.blinded_sig == token.sig.as_slice() {
        return true;
    }
    let (Ok(sig), Ok(beta)) = (
        g1_from(token.sig.as_slice(), "token signature"),
        g1_from(&view.beta, "blinded element"),
    ) else {
        return false;
    };
    // e(sig, g2) == e(beta, vk) iff H(m)^sk == beta^sk, i.e. the "blinded"
    // element was the bare hash.
    pairing_eq(&sig, &G2Element::generator(), &beta, &vk.element)
}

pub struct LinkageOutcome {
    pub trials: usize,
    pub correct: usize,
}

impl LinkageOutcome {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.trials as f64
    }
}

/// The linkage game: per trial, every wallet acquires one token; the
/// colluding servers then see the tokens in shuffled order and must say
/// which issuance produced which token. `blind` toggles the client-side
/// blinding; the honest protocol should pin the adversary at chance while
/// the unblinded contrast run hands it certainty.
pub fn attack_linkage(
    deployment: &Deployment,
    wallets: &[&Wallet],
    pp_id: &str,
    password: &str,
    trials: usize,
    blind: bool,
    seed: u64,
) -> Result<LinkageOutcome, ProtocolError> {
    let endpoints = deployment.client_endpoints();
    let n = deployment.n() as usize;
    let users = wallets.len();
    let vk = deployment
        .verification_keys()
        .get(pp_id)
        .ok_or_else(|| ProtocolError::UnknownPolicy(pp_id.to_string()))?
        .clone();
    let options = TokenFlowOptions {
        signing_pp_override: None,
        skip_blinding: !blind,
        verify_locally: false,
    };
    let mut entropy = EntropySource::from_u64(seed);
    let mut correct = 0;

    for _ in 0..trials {
        let mark = deployment.transcript.mark();
        let mut tokens = Vec::with_capacity(users);
        for (user, wallet) in wallets.iter().enumerate() {
            let mut q = vec![0u8; TOKEN_NONCE_LEN];
            entropy.fill(&mut q);
            let challenge = Challenge {
                vid: "linkage-lab".into(),
                q: Bytes(q),
                t: deployment.clock.now(),
                pp_id: pp_id.to_string(),
            };
            let token = wallet.acquire_token_inner(&challenge, password, &endpoints, &options)?;
            tokens.push((user, token));
        }
        let views = issuance_views(&deployment.transcript.since(mark), n)?;
        if views.len() != users {
            return Err(ProtocolError::Transport(format!(
                "expected {} issuance views, saw {}",
                users,
                views.len()
            )));
        }
        for (view, wallet) in views.iter().zip(wallets) {
            assert_eq!(view.uid, wallet.uid(), "views must be in issuance order");
        }

        // The adversary receives the tokens in shuffled order.
        for i in (1..tokens.len()).rev() {
            let mut pick = [0u8; 8];
            entropy.fill(&mut pick);
            tokens.swap(i, (u64::from_be_bytes(pick) as usize) % (i + 1));
        }

        // Provable matches first, random guesses for the rest.
        let mut guess: Vec<Option<usize>> = vec![None; users];
        let mut taken = vec![false; tokens.len()];
        for (k, view) in views.iter().enumerate() {
            for (l, (_, token)) in tokens.iter().enumerate() {
                if !taken[l] && view_matches_token(view, token, &vk) {
                    guess[k] = Some(l);
                    taken[l] = true;
                    break;
                }
            }
        }
        let mut remaining: Vec<usize> =
            (0..tokens.len()).filter(|l| !taken[*l]).collect();
        for slot in guess.iter_mut().filter(|g| g.is_none()) {
            let mut pick = [0u8; 8];
            entropy.fill(&mut pick);
            let at = (u64::from_be_bytes(pick) as usize) % remaining.len();
            *slot = Some(remaining.swap_remove(at));
        }

        // Views are in issuance order, i.e. view k belongs to wallet k.
        let all_right = guess
            .iter()
            .enumerate()
            .all(|(k, g)| g.map(|l| tokens[l].0 == k).unwrap_or(false));
        if all_right {
            correct += 1;
        }
    }
    Ok(LinkageOutcome { trials, correct })
}

/// Where a needle was found: which file, and in which encoding.
pub struct ScanHit {
    pub file: PathBuf,
    pub encoding: &'static str,
}

pub struct ScanReport {
    pub files_scanned: usize,
    pub hits: Vec<ScanHit>,
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty()
        && haystack.windows(needle.len()).any(|window| window == needle)
}

/// Scan every server's persistence file for the byte patterns, raw and in
/// the encodings the files actually use. Finding one means a health
/// record survived at rest in recoverable form.
pub fn scan_at_rest(base_dir: impl AsRef<Path>, needles: &[Vec<u8>]) -> std::io::Result<ScanReport> {
    use base64::Engine;
    let mut report = ScanReport { files_scanned: 0, hits: Vec::new() };
    for entry in std::fs::read_dir(base_dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !(name.starts_with("server-") && name.ends_with(".db")) {
            continue;
        }
        report.files_scanned += 1;
        let haystack = std::fs::read(&path)?;
        for needle in needles {
            let variants: [(&'static str, Vec<u8>); 3] = [
                ("raw", needle.clone()),
                ("hex", hex::encode(needle).into_bytes()),
                (
                    "base64",
                    base64::engine::general_purpose::STANDARD.encode(needle).into_bytes(),
                ),
            ];
            for (encoding, pattern) in variants {
                if contains(&haystack, &pattern) {
                    report.hits.push(ScanHit { file: path.clone(), encoding });
                }
            }
        }
    }
    Ok(report)
}

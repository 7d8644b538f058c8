//! Message transcript: who said what to whom, in order.
//!
//! Every endpoint records through a shared `Transcript` handle. Round
//! counts are derived purely from the recorded entries, so the numbers a
//! test asserts are the numbers the wire actually saw, not what a flow
//! claims about itself.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::message::Envelope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Client,
    Server(u32),
    Reader,
    Authority,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Client => write!(f, "client"),
            Role::Server(i) => write!(f, "server-{i}"),
            Role::Reader => write!(f, "reader"),
            Role::Authority => write!(f, "authority"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TranscriptEntry {
    pub from: Role,
    pub to: Role,
    pub msg_type: String,
    pub payload_digest: [u8; 32],
    /// Retained verbatim so tests can inspect exactly what crossed the
    /// channel (e.g. prove a field never appears in any server-bound
    /// message).
    pub payload: serde_json::Value,
    pub wall_time: u64,
}

/// Append-only shared recorder. Cloning hands out another handle to the
/// same log.
#[derive(Clone, Default)]
pub struct Transcript {
    entries: Arc<Mutex<Vec<TranscriptEntry>>>,
}

impl Transcript {
    pub fn new() -> Transcript {
        Transcript::default()
    }

    pub fn record(&self, from: Role, to: Role, envelope: &Envelope) {
        let payload_bytes = serde_json::to_vec(&envelope.payload).expect("payload serializes");
        let entry = TranscriptEntry {
            from,
            to,
            msg_type: envelope.msg_type.clone(),
            payload_digest: Sha256::digest(&payload_bytes).into(),
            payload: envelope.payload.clone(),
            wall_time: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        self.entries.lock().expect("transcript lock").push(entry);
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().expect("transcript lock").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("transcript lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position marker for windowed analysis: `since(mark())` after some
    /// activity yields exactly that activity's entries.
    pub fn mark(&self) -> usize {
        self.len()
    }

    pub fn since(&self, mark: usize) -> Vec<TranscriptEntry> {
        let entries = self.entries.lock().expect("transcript lock");
        entries[mark.min(entries.len())..].to_vec()
    }

    pub fn clear(&self) {
        self.entries.lock().expect("transcript lock").clear();
    }

    /// Line-delimited export, one entry per line.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for e in self.entries.lock().expect("transcript lock").iter() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.from,
                e.to,
                e.msg_type,
                hex::encode(e.payload_digest),
                e.wall_time
            ));
        }
        out
    }
}

/// Round-trip counts per channel, as seen on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoundCounts {
    /// Round trips between the client and each individual server.
    pub per_server: BTreeMap<u32, u64>,
    /// Round trips on the client/reader channel.
    pub client_reader: u64,
}

impl RoundCounts {
    /// The client/server round count, provided every server saw the same
    /// number. Panics on a lopsided transcript; a flow that talks to
    /// servers unevenly is a bug the tests should see loudly.
    pub fn client_server(&self) -> u64 {
        let mut values = self.per_server.values().copied();
        let first = values.next().unwrap_or(0);
        assert!(
            values.all(|v| v == first),
            "uneven per-server rounds: {:?}",
            self.per_server
        );
        first
    }
}

/// Count request/reply round trips on one channel: a message in one
/// direction and the next message in the opposite direction pair into one
/// round; consecutive same-direction messages coalesce into a single
/// flight; an unanswered trailing flight is not a completed round.
fn channel_rounds<'a>(
    entries: impl Iterator<Item = &'a TranscriptEntry>,
    a: Role,
    b: Role,
) -> u64 {
    let mut rounds = 0;
    let mut pending: Option<Role> = None;
    for e in entries {
        let on_channel = (e.from == a && e.to == b) || (e.from == b && e.to == a);
        if !on_channel {
            continue;
        }
        match pending {
            None => pending = Some(e.from),
            Some(dir) if dir != e.from => {
                rounds += 1;
                pending = None;
            }
            Some(_) => {}
        }
    }
    rounds
}

/// Derive round counts from a transcript slice. Server indices are
/// discovered from the entries themselves.
pub fn record_rounds(entries: &[TranscriptEntry]) -> RoundCounts {
    let mut servers: Vec<u32> = entries
        .iter()
        .flat_map(|e| [e.from, e.to])
        .filter_map(|r| match r {
            Role::Server(i) => Some(i),
            _ => None,
        })
        .collect();
    servers.sort_unstable();
    servers.dedup();

    let mut per_server = BTreeMap::new();
    for i in servers {
        per_server.insert(i, channel_rounds(entries.iter(), Role::Client, Role::Server(i)));
    }
    RoundCounts {
        per_server,
        client_reader: channel_rounds(entries.iter(), Role::Client, Role::Reader),
    }
}

//! Standing up and reopening a full installation: n issuing servers with
//! a completed key ceremony, the health authority, and factories for
//! wallets and readers that share the installation's trust anchors.
//!
//! Everything the parties persist lives under one base directory, one
//! file per party, so a deployment survives process restarts and the CLI
//! can drive a long-lived installation one command at a time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use dhp_core::blindsig::{
    aggregate_verification_key, sig_vf, PublicKey, Signature, VerificationKey,
};

use crate::authority::HealthAuthority;
use crate::codec::{g1_from, g2_from};
use crate::entropy::EntropySource;
use crate::issuer::ServerNode;
use crate::message::{msg, pop_binding, Ack, Bytes, Envelope, ProtocolError, Token};
use crate::metering::RoleMeter;
use crate::policy::PublicPolicy;
use crate::reader::{Reader, Verdict, DEFAULT_FRESHNESS_WINDOW, DEFAULT_SESSION_TIMEOUT};
use crate::secure_element::SecureElement;
use crate::store::Store;
use crate::time::{Clock, SystemClock};
use crate::transcript::{Role, Transcript};
use crate::transport::{Endpoint, Handler, InProcEndpoint, TcpEndpoint, TcpServer};
use crate::wallet::{PolicyDirectory, Wallet};

pub const DEFAULT_SERVER_SESSION_TTL: u64 = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    /// Direct dispatch on the calling thread. Supports metering.
    InProc,
    /// Length-prefixed frames over local TCP, one listener per server.
    Tcp,
}

#[derive(Clone)]
pub struct DeploymentConfig {
    pub n: u32,
    /// Seeded runs reproduce bit for bit; `None` draws from the OS.
    pub seed: Option<u64>,
    pub policies: Vec<PublicPolicy>,
    pub freshness_window: u64,
    pub session_timeout: u64,
    pub server_session_ttl: u64,
    pub base_dir: PathBuf,
    pub transport: TransportKind,
}

impl DeploymentConfig {
    pub fn new(n: u32, base_dir: impl AsRef<Path>) -> DeploymentConfig {
        DeploymentConfig {
            n,
            seed: None,
            policies: crate::policy::standard_policies(),
            freshness_window: DEFAULT_FRESHNESS_WINDOW,
            session_timeout: DEFAULT_SESSION_TIMEOUT,
            server_session_ttl: DEFAULT_SERVER_SESSION_TTL,
            base_dir: base_dir.as_ref().to_path_buf(),
            transport: TransportKind::InProc,
        }
    }

    pub fn seeded(mut self, seed: u64) -> DeploymentConfig {
        self.seed = Some(seed);
        self
    }

    pub fn over_tcp(mut self) -> DeploymentConfig {
        self.transport = TransportKind::Tcp;
        self
    }

    pub fn with_policies(mut self, policies: Vec<PublicPolicy>) -> DeploymentConfig {
        self.policies = policies;
        self
    }
}

pub struct Deployment {
    n: u32,
    freshness_window: u64,
    session_timeout: u64,
    transport: TransportKind,
    base_dir: PathBuf,
    pub nodes: Vec<Arc<ServerNode>>,
    pub authority: HealthAuthority,
    pub transcript: Transcript,
    pub meter: RoleMeter,
    pub clock: Arc<dyn Clock>,
    keys: BTreeMap<String, VerificationKey>,
    policies: Vec<PublicPolicy>,
    entropy: Mutex<EntropySource>,
    tcp_servers: Vec<TcpServer>,
    tcp_addrs: Vec<String>,
}

fn io_invalid(what: String) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, what)
}

impl Deployment {
    pub fn run(config: DeploymentConfig) -> std::io::Result<Deployment> {
        Self::run_with_clock(config, Arc::new(SystemClock))
    }

    /// Bootstrap from nothing: every server draws its own key material,
    /// publishes per-policy contributions with proofs of possession, and
    /// the verification keys are the products of all n contributions. No
    /// party ever holds a whole signing key.
    pub fn run_with_clock(
        config: DeploymentConfig,
        clock: Arc<dyn Clock>,
    ) -> std::io::Result<Deployment> {
        assert!(config.n >= 1, "need at least one server");
        std::fs::create_dir_all(&config.base_dir)?;
        let root = match config.seed {
            Some(seed) => EntropySource::from_u64(seed),
            None => EntropySource::system(),
        };

        let mut nodes = Vec::with_capacity(config.n as usize);
        for i in 1..=config.n {
            let seed = root.child(&format!("server-{i}")).bytes32();
            let node = ServerNode::bootstrap(
                i,
                config.n,
                config.server_session_ttl,
                config.base_dir.join(format!("server-{i}.db")),
                seed,
                &config.policies,
                clock.clone(),
            )?;
            nodes.push(Arc::new(node));
        }
        let authority = HealthAuthority::bootstrap(
            config.base_dir.join("authority.db"),
            root.child("authority").bytes32(),
        )?;

        let keys = ceremony_keys(&nodes, &config.policies)?;
        let identity_dir: BTreeMap<u32, PublicKey> =
            nodes.iter().map(|node| (node.index(), node.identity_public())).collect();
        for node in &nodes {
            node.install_directory(&identity_dir, &authority.public_key())?;
        }

        let mut deployment = Deployment {
            n: config.n,
            freshness_window: config.freshness_window,
            session_timeout: config.session_timeout,
            transport: config.transport,
            base_dir: config.base_dir.clone(),
            nodes,
            authority,
            transcript: Transcript::new(),
            meter: RoleMeter::new(),
            clock,
            keys,
            policies: config.policies.clone(),
            entropy: Mutex::new(root.child("runtime")),
            tcp_servers: Vec::new(),
            tcp_addrs: Vec::new(),
        };
        deployment.wire()?;
        deployment.write_manifest(&config, &root, 0)?;
        Ok(deployment)
    }

    /// Reopen a previously bootstrapped installation from its files. Key
    /// material and ledgers come back as persisted; runtime randomness
    /// continues on a fresh stream so reopened parties never reuse nonces.
    pub fn reopen(base_dir: impl AsRef<Path>) -> std::io::Result<Deployment> {
        Self::reopen_with_clock(base_dir, Arc::new(SystemClock))
    }

    pub fn reopen_with_clock(
        base_dir: impl AsRef<Path>,
        clock: Arc<dyn Clock>,
    ) -> std::io::Result<Deployment> {
        let base_dir = base_dir.as_ref().to_path_buf();
        let mut manifest = Store::open(base_dir.join("deployment.db"))?;
        let get = |m: &Store, key: &str| -> std::io::Result<String> {
            m.get(key).map(str::to_string).ok_or_else(|| io_invalid(format!("missing {key}")))
        };
        let n: u32 = get(&manifest, "n")?.parse().map_err(|_| io_invalid("bad n".into()))?;
        let freshness_window: u64 = get(&manifest, "freshness_window")?
            .parse()
            .map_err(|_| io_invalid("bad freshness window".into()))?;
        let session_timeout: u64 = get(&manifest, "session_timeout")?
            .parse()
            .map_err(|_| io_invalid("bad session timeout".into()))?;
        let transport = match get(&manifest, "transport")?.as_str() {
            "tcp" => TransportKind::Tcp,
            _ => TransportKind::InProc,
        };
        let seed_bytes = manifest
            .get_bytes("root_seed")
            .ok_or_else(|| io_invalid("missing root seed".into()))?;
        let seed: [u8; 32] =
            seed_bytes.try_into().map_err(|_| io_invalid("bad root seed".into()))?;
        let boots: u64 = get(&manifest, "boots")?
            .parse()
            .map_err(|_| io_invalid("bad boots counter".into()))?;
        let boots = boots + 1;
        manifest.set("boots", &boots.to_string())?;

        let mut policies = Vec::new();
        let policy_keys: Vec<String> =
            manifest.keys_with_prefix("policy.").map(str::to_string).collect();
        for key in policy_keys {
            let policy: PublicPolicy = serde_json::from_str(get(&manifest, &key)?.as_str())
                .map_err(|e| io_invalid(e.to_string()))?;
            policies.push(policy);
        }
        let mut keys = BTreeMap::new();
        let vk_keys: Vec<String> = manifest.keys_with_prefix("vk.").map(str::to_string).collect();
        for key in vk_keys {
            let pp_id = key.trim_start_matches("vk.").to_string();
            let bytes =
                manifest.get_bytes(&key).ok_or_else(|| io_invalid("bad vk encoding".into()))?;
            let element =
                g2_from(&bytes, "verification key").map_err(|e| io_invalid(e.to_string()))?;
            keys.insert(pp_id.clone(), VerificationKey { policy_label: pp_id, element });
        }

        let mut nodes = Vec::with_capacity(n as usize);
        for i in 1..=n {
            let node =
                ServerNode::reopen(base_dir.join(format!("server-{i}.db")), clock.clone())?;
            nodes.push(Arc::new(node));
        }
        let authority = HealthAuthority::reopen(base_dir.join("authority.db"))?;

        let root = EntropySource::from_seed(seed);
        let mut deployment = Deployment {
            n,
            freshness_window,
            session_timeout,
            transport,
            base_dir,
            nodes,
            authority,
            transcript: Transcript::new(),
            meter: RoleMeter::new(),
            clock,
            keys,
            policies,
            entropy: Mutex::new(root.child(&format!("runtime-boot-{boots}"))),
            tcp_servers: Vec::new(),
            tcp_addrs: Vec::new(),
        };
        deployment.wire()?;
        Ok(deployment)
    }

    fn write_manifest(
        &self,
        config: &DeploymentConfig,
        root: &EntropySource,
        boots: u64,
    ) -> std::io::Result<()> {
        let mut manifest = Store::open(self.base_dir.join("deployment.db"))?;
        manifest.set("n", &config.n.to_string())?;
        manifest.set("freshness_window", &config.freshness_window.to_string())?;
        manifest.set("session_timeout", &config.session_timeout.to_string())?;
        manifest.set(
            "transport",
            match config.transport {
                TransportKind::InProc => "inproc",
                TransportKind::Tcp => "tcp",
            },
        )?;
        manifest.set_bytes("root_seed", &root.child("manifest").bytes32())?;
        manifest.set("boots", &boots.to_string())?;
        for policy in &config.policies {
            let json = serde_json::to_string(policy).map_err(|e| io_invalid(e.to_string()))?;
            manifest.set(&format!("policy.{}", policy.pp_id), &json)?;
        }
        for (pp_id, vk) in &self.keys {
            manifest.set_bytes(&format!("vk.{pp_id}"), &vk.element.to_compressed())?;
        }
        manifest.set_bytes("ha_pk", &self.authority.public_key().0.to_compressed())?;
        Ok(())
    }

    /// Connect every pair of servers, and spawn listeners first when the
    /// deployment speaks TCP.
    fn wire(&mut self) -> std::io::Result<()> {
        if self.transport == TransportKind::Tcp {
            self.tcp_servers.clear();
            self.tcp_addrs.clear();
            for node in &self.nodes {
                let handler: Arc<dyn Handler> = node.clone();
                let server = TcpServer::spawn(handler)?;
                self.tcp_addrs.push(server.addr.clone());
                self.tcp_servers.push(server);
            }
        }
        for node in &self.nodes {
            let i = node.index();
            let mut peers: BTreeMap<u32, Arc<dyn Endpoint>> = BTreeMap::new();
            for other in &self.nodes {
                let j = other.index();
                if j == i {
                    continue;
                }
                peers.insert(j, self.endpoint(Role::Server(i), j));
            }
            node.set_peers(peers);
        }
        Ok(())
    }

    fn endpoint(&self, from: Role, to_server: u32) -> Arc<dyn Endpoint> {
        match self.transport {
            TransportKind::InProc => Arc::new(InProcEndpoint {
                handler: self.nodes[(to_server - 1) as usize].clone(),
                from,
                to: Role::Server(to_server),
                transcript: self.transcript.clone(),
                meter: Some(self.meter.clone()),
            }),
            TransportKind::Tcp => Arc::new(TcpEndpoint {
                addr: self.tcp_addrs[(to_server - 1) as usize].clone(),
                from,
                to: Role::Server(to_server),
                transcript: self.transcript.clone(),
            }),
        }
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn policies(&self) -> &[PublicPolicy] {
        &self.policies
    }

    pub fn verification_keys(&self) -> &BTreeMap<String, VerificationKey> {
        &self.keys
    }

    /// One endpoint per server in index order, as seen from the client.
    pub fn client_endpoints(&self) -> Vec<Arc<dyn Endpoint>> {
        (1..=self.n).map(|i| self.endpoint(Role::Client, i)).collect()
    }

    pub fn authority_endpoints(&self) -> Vec<Arc<dyn Endpoint>> {
        (1..=self.n).map(|i| self.endpoint(Role::Authority, i)).collect()
    }

    fn policy_directory(&self) -> PolicyDirectory {
        self.policies
            .iter()
            .filter_map(|policy| {
                self.keys
                    .get(&policy.pp_id)
                    .map(|vk| (policy.pp_id.clone(), (policy.clone(), vk.clone())))
            })
            .collect()
    }

    /// A fresh wallet wired to this installation's directory, with its own
    /// secure element and persistence files.
    pub fn new_wallet(&self, uid: &str, consent: &str) -> std::io::Result<Wallet> {
        let se = Arc::new(SecureElement::open(self.base_dir.join(format!("se-{uid}.db")))?);
        let entropy = self.entropy.lock().expect("entropy lock").child(&format!("wallet-{uid}"));
        let mut wallet = Wallet::bootstrap(
            self.base_dir.join(format!("wallet-{uid}.db")),
            uid,
            consent,
            se,
            self.policy_directory(),
            entropy,
        )?;
        if self.transport == TransportKind::InProc {
            wallet.set_meter(self.meter.clone());
        }
        Ok(wallet)
    }

    pub fn open_wallet(&self, uid: &str) -> std::io::Result<Wallet> {
        let se = Arc::new(SecureElement::open(self.base_dir.join(format!("se-{uid}.db")))?);
        let entropy =
            self.entropy.lock().expect("entropy lock").child(&format!("wallet-{uid}-reopen"));
        let mut wallet =
            Wallet::reopen(self.base_dir.join(format!("wallet-{uid}.db")), se, entropy)?;
        if self.transport == TransportKind::InProc {
            wallet.set_meter(self.meter.clone());
        }
        Ok(wallet)
    }

    /// A fresh reader trusting this installation's verification keys.
    pub fn new_reader(&self, vid: &str) -> std::io::Result<Reader> {
        let entropy = self.entropy.lock().expect("entropy lock").child(&format!("reader-{vid}"));
        let mut reader = Reader::bootstrap(
            self.base_dir.join(format!("reader-{vid}.db")),
            vid,
            self.keys.clone(),
            self.clock.clone(),
            entropy,
        )?;
        reader.set_windows(self.freshness_window, self.session_timeout);
        if self.transport == TransportKind::InProc {
            reader.set_meter(self.meter.clone());
        }
        Ok(reader)
    }

    pub fn open_reader(&self, vid: &str) -> std::io::Result<Reader> {
        let entropy =
            self.entropy.lock().expect("entropy lock").child(&format!("reader-{vid}-reopen"));
        let mut reader = Reader::reopen(
            self.base_dir.join(format!("reader-{vid}.db")),
            self.clock.clone(),
            entropy,
        )?;
        reader.set_windows(self.freshness_window, self.session_timeout);
        if self.transport == TransportKind::InProc {
            reader.set_meter(self.meter.clone());
        }
        Ok(reader)
    }

    /// Proactive share refresh across all servers: every server draws and
    /// distributes zero-sum deltas, then all apply together. Runs on the
    /// administrative channel, not the public transports.
    pub fn refresh(&self) -> Result<(), ProtocolError> {
        let sid = hex::encode(self.entropy.lock().expect("entropy lock").bytes16());
        for node in &self.nodes {
            let reply = node.handle(Envelope::request(msg::REFRESH_START, &sid, &Ack {}));
            let _: Ack = reply.expect_reply(msg::REFRESH_START)?;
        }
        for node in &self.nodes {
            let reply = node.handle(Envelope::request(msg::REFRESH_APPLY, &sid, &Ack {}));
            let _: crate::message::RefreshApplyResp = reply.expect_reply(msg::REFRESH_APPLY)?;
        }
        Ok(())
    }

    /// One full presentation: the reader issues a challenge, the wallet
    /// acquires a token for it, the reader judges it. The challenge and
    /// the presented token are the only client/reader traffic.
    pub fn run_verification(
        &self,
        wallet: &Wallet,
        reader: &Reader,
        pp_id: &str,
        password: &str,
    ) -> Result<(Verdict, Token), ProtocolError> {
        let challenge = reader.new_session(pp_id)?;
        let sid = hex::encode(&challenge.q.as_slice()[..8]);
        self.transcript.record(
            Role::Reader,
            Role::Client,
            &Envelope::request(msg::CHALLENGE, &sid, &challenge),
        );
        let token = match wallet.acquire_token(&challenge, password, &self.client_endpoints()) {
            Ok(token) => token,
            Err(e) => {
                // Nobody will present against this challenge; free the
                // reader for the next holder.
                reader.abandon_session();
                return Err(e);
            }
        };
        self.transcript.record(
            Role::Client,
            Role::Reader,
            &Envelope::request(msg::PRESENT_TOKEN, &sid, &Bytes(token.to_wire())),
        );
        let verdict = reader.verify_token(&token);
        Ok((verdict, token))
    }

    pub fn shutdown(&mut self) {
        for server in &mut self.tcp_servers {
            server.shutdown();
        }
        self.tcp_servers.clear();
    }
}

impl Drop for Deployment {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Verify every proof of possession and multiply the contributions into
/// per-policy verification keys. A bad proof aborts the ceremony: it means
/// a server claimed a share it cannot use, the classic rogue-key shape.
fn ceremony_keys(
    nodes: &[Arc<ServerNode>],
    policies: &[PublicPolicy],
) -> std::io::Result<BTreeMap<String, VerificationKey>> {
    let mut per_label: BTreeMap<String, BTreeMap<u32, PublicKey>> = BTreeMap::new();
    for node in nodes {
        for contribution in node.key_contributions() {
            let point = g2_from(&contribution.contribution, "key contribution")
                .map_err(|e| io_invalid(e.to_string()))?;
            let pop = g1_from(&contribution.pop, "proof of possession")
                .map_err(|e| io_invalid(e.to_string()))?;
            let binding =
                pop_binding(&contribution.label, contribution.index, &contribution.contribution);
            if !sig_vf(&PublicKey(point), &binding, &Signature(pop)) {
                return Err(io_invalid(format!(
                    "key ceremony: server {} failed proof of possession for {}",
                    contribution.index, contribution.label
                )));
            }
            per_label
                .entry(contribution.label)
                .or_default()
                .insert(contribution.index, PublicKey(point));
        }
    }

    let mut keys = BTreeMap::new();
    for policy in policies {
        let contributions = per_label
            .remove(&policy.pp_id)
            .ok_or_else(|| io_invalid(format!("no contributions for {}", policy.pp_id)))?;
        if contributions.len() != nodes.len() {
            return Err(io_invalid(format!(
                "key ceremony: {} of {} contributions for {}",
                contributions.len(),
                nodes.len(),
                policy.pp_id
            )));
        }
        keys.insert(
            policy.pp_id.clone(),
            aggregate_verification_key(&policy.pp_id, contributions.into_values()),
        );
    }
    Ok(keys)
}

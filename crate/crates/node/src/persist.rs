//! On-disk layout of a node's state directory and of the organization's
//! directory.
//!
//! A node state directory holds:
//!
//! | file             | contents                                           |
//! |------------------|----------------------------------------------------|
//! | `system.json`    | [`SystemConfig`]                                   |
//! | `settings.json`  | [`Settings`]: where the organization lives         |
//! | `identity.json`  | nym, contact key, MS-PSI key, unspent tokens       |
//! | `node.json`      | bulletin cursor, queries, reports, conversations, metrics |
//! | `messenger.json` | channel counters, watches, cover keys, send queues |
//! | `records.bin`    | listed records: `seq u64 ‖ posted_at u64 ‖ len u32 ‖ record` |
//! | `tags.bin`       | our own tag collection, once published             |
//! | `spent/`         | spend registry, one `spent-<epoch>.log` per epoch  |
//! | `inbox/`         | commands left for a running daemon                 |
//! | `state.lock`     | held by whichever process owns the state           |
//!
//! The organization directory holds `system.json` and `issuer.json` (issuer
//! secret key, rate limits, and per-journalist issuance counts).
//!
//! Every file is replaced atomically by writing a sibling and renaming it.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use datashare_core::crypto::Scalar;
use datashare_core::tokens::{AccountUsage, Issuer, IssuerKeys, RateLimitPolicy, SpendRegistry};
use datashare_pigeonhole::clock::Millis;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{Organization, SystemConfig};
use crate::node::{Node, NodeSnapshot};
use crate::NodeError;

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), NodeError> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, NodeError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Settings {
    /// Organization directory used for token issuance.
    pub org: Option<PathBuf>,
}

/// A unit of work handed from a short-lived command to the daemon.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueuedCommand {
    Publish { corpus: PathBuf },
    Query { keywords: Vec<String> },
    /// `peer` is an owner nym or a querier key, hex-encoded.
    Chat { peer: String, text: String },
    FetchTokens { count: usize },
}

pub struct StateDir {
    root: PathBuf,
}

impl StateDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StateDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn is_initialized(&self) -> bool {
        self.path("identity.json").exists()
    }

    /// Takes the state lock without blocking. `None` means another process
    /// holds it; the lock lasts as long as the returned file.
    pub fn try_lock(&self) -> io::Result<Option<File>> {
        fs::create_dir_all(&self.root)?;
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.path("state.lock"))?;
        match f.try_lock() {
            Ok(()) => Ok(Some(f)),
            Err(fs::TryLockError::WouldBlock) => Ok(None),
            Err(fs::TryLockError::Error(e)) => Err(e),
        }
    }

    pub fn registry(&self) -> io::Result<SpendRegistry> {
        SpendRegistry::open(self.path("spent"))
    }

    pub fn save_config(&self, config: &SystemConfig) -> Result<(), NodeError> {
        fs::create_dir_all(&self.root)?;
        write_json(&self.path("system.json"), config)
    }

    pub fn load_config(&self) -> Result<SystemConfig, NodeError> {
        read_json(&self.path("system.json"))
    }

    pub fn save_settings(&self, settings: &Settings) -> Result<(), NodeError> {
        write_json(&self.path("settings.json"), settings)
    }

    pub fn load_settings(&self) -> Result<Settings, NodeError> {
        let path = self.path("settings.json");
        if !path.exists() {
            return Ok(Settings::default());
        }
        read_json(&path)
    }

    pub fn save_node(&self, node: &Node) -> Result<(), NodeError> {
        fs::create_dir_all(&self.root)?;
        let snap = node.snapshot();
        write_json(&self.path("identity.json"), &snap.identity)?;
        write_json(&self.path("node.json"), &snap.state)?;
        write_json(&self.path("messenger.json"), &snap.messenger)?;
        let mut records = Vec::new();
        for (seq, posted_at, bytes) in &snap.records {
            records.extend_from_slice(&seq.to_be_bytes());
            records.extend_from_slice(&posted_at.to_be_bytes());
            records.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            records.extend_from_slice(bytes);
        }
        write_atomic(&self.path("records.bin"), &records)?;
        if let Some(tags) = &snap.tags {
            write_atomic(&self.path("tags.bin"), tags)?;
        }
        Ok(())
    }

    pub fn load_node(&self, seed: u64) -> Result<Node, NodeError> {
        let config = self.load_config()?;
        let records = match fs::read(self.path("records.bin")) {
            Ok(b) => parse_records(&b)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let tags = match fs::read(self.path("tags.bin")) {
            Ok(b) => Some(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let messenger_path = self.path("messenger.json");
        let snapshot = NodeSnapshot {
            identity: read_json(&self.path("identity.json"))?,
            state: if self.path("node.json").exists() {
                read_json(&self.path("node.json"))?
            } else {
                serde_json::json!({})
            },
            messenger: read_json(&messenger_path)?,
            records,
            tags,
        };
        Node::restore(config, snapshot, self.registry()?, seed)
    }

    fn inbox(&self) -> PathBuf {
        self.path("inbox")
    }

    /// Leaves a command for the daemon. File names sort in arrival order.
    pub fn push_command(&self, cmd: &QueuedCommand, now: Millis) -> Result<PathBuf, NodeError> {
        let dir = self.inbox();
        fs::create_dir_all(&dir)?;
        for n in 0u32.. {
            let path = dir.join(format!("{now:016}-{n:04}.json"));
            if !path.exists() {
                write_json(&path, cmd)?;
                return Ok(path);
            }
        }
        unreachable!()
    }

    /// Removes and returns every queued command, oldest first. Unreadable
    /// files are set aside with a `.bad` extension.
    pub fn take_commands(&self) -> Result<Vec<QueuedCommand>, NodeError> {
        let dir = self.inbox();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut out = Vec::with_capacity(paths.len());
        for p in paths {
            match read_json(&p) {
                Ok(cmd) => {
                    fs::remove_file(&p)?;
                    out.push(cmd);
                }
                Err(_) => fs::rename(&p, p.with_extension("bad"))?,
            }
        }
        Ok(out)
    }
}

fn parse_records(mut b: &[u8]) -> Result<Vec<(u64, Millis, Vec<u8>)>, NodeError> {
    let mut out = Vec::new();
    while !b.is_empty() {
        if b.len() < 20 {
            return Err(NodeError::Malformed("records.bin truncated"));
        }
        let seq = u64::from_be_bytes(b[..8].try_into().unwrap());
        let posted_at = u64::from_be_bytes(b[8..16].try_into().unwrap());
        let len = u32::from_be_bytes(b[16..20].try_into().unwrap()) as usize;
        if b.len() < 20 + len {
            return Err(NodeError::Malformed("records.bin truncated"));
        }
        out.push((seq, posted_at, b[20..20 + len].to_vec()));
        b = &b[20 + len..];
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SavedIssuer {
    msk: Scalar,
    policy: RateLimitPolicy,
    accounts: Vec<AccountUsage>,
}

/// The organization's directory.
pub struct OrgDir {
    root: PathBuf,
}

impl OrgDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OrgDir { root: root.into() }
    }

    pub fn save(&self, org: &Organization) -> Result<(), NodeError> {
        fs::create_dir_all(&self.root)?;
        write_json(&self.root.join("system.json"), &org.config)?;
        self.save_issuer(&org.issuer)
    }

    pub fn save_issuer(&self, issuer: &Issuer) -> Result<(), NodeError> {
        let saved = SavedIssuer {
            msk: *issuer_msk(issuer),
            policy: *issuer.policy(),
            accounts: issuer.accounts(),
        };
        write_json(&self.root.join("issuer.json"), &saved)
    }

    pub fn load(&self) -> Result<Organization, NodeError> {
        let config: SystemConfig = read_json(&self.root.join("system.json"))?;
        let saved: SavedIssuer = read_json(&self.root.join("issuer.json"))?;
        let mut issuer = Issuer::new(IssuerKeys::from_secret(saved.msk)?, saved.policy);
        issuer.restore_accounts(saved.accounts);
        Ok(Organization { config, issuer })
    }

    /// Exclusive access to the issuer state while fetching tokens.
    pub fn lock(&self) -> io::Result<File> {
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.root.join("issuer.lock"))?;
        f.lock()?;
        Ok(f)
    }
}

fn issuer_msk(issuer: &Issuer) -> &Scalar {
    issuer.keys().msk()
}

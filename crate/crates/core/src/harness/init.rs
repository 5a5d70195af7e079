// SPDX-License-Identifier: Apache-2.0

//! Deployment directories: creating one, and bringing each role up from
//! its configuration file.
//!
//! ```text
//! DIR/capsule.toml  middleware.toml  mount.toml  mount-<user>.toml
//! DIR/keys/         inodes.wkey data.wkey inodes.pub data.pub
//!                   inodes.rkey data.rkey admin.key <user>.key
//! DIR/store/        inodes.capsule data.capsule
//! DIR/journal/<user>/
//! DIR/revoked.txt
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use super::{HarnessError, UserSpec};
use crate::block::{Identity, DEFAULT_BLOCK_SIZE, DEFAULT_NOBODY_UID};
use crate::client::{Client, ClientSetup};
use crate::config::{
    CacheSection, CapsuleEntry, CapsuleServerConfig, ConfigError, MiddlewareConfig, MountConfig, PolicyConfig,
};
use crate::crypto::{CapsuleReadKey, CapsuleWriteKey, KeyPair, PublicKey, Scheme};
use crate::middleware::{Middleware, MiddlewareSetup};
use crate::net::RemoteService;
use crate::server::{store_path, CapsuleMetadata, CapsuleServer, CapsuleStore};

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Invalid(e.to_string())
    }
}

impl From<crate::crypto::CryptoError> for HarnessError {
    fn from(e: crate::crypto::CryptoError) -> Self {
        HarnessError::Invalid(e.to_string())
    }
}

#[derive(Clone, Debug)]
pub struct InitOptions {
    pub block_size: usize,
    pub scheme: Scheme,
    pub force: bool,
    pub capsule_listen: String,
    pub middleware_listen: String,
    /// Root ACL members; the first one also gets `mount.toml`.
    pub users: Vec<UserSpec>,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            scheme: Scheme::Ed25519,
            force: false,
            capsule_listen: "127.0.0.1:7400".into(),
            middleware_listen: "127.0.0.1:7401".into(),
            users: vec![UserSpec::member("client", 1000)],
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InitSummary {
    pub dir: PathBuf,
    pub inode_capsule: String,
    pub data_capsule: String,
    pub root: String,
    pub files: Vec<PathBuf>,
}

const OWNED: [&str; 6] = [
    "capsule.toml",
    "middleware.toml",
    "mount.toml",
    "keys",
    "store",
    "journal",
];

fn mount_file(index: usize, name: &str) -> String {
    if index == 0 {
        "mount.toml".into()
    } else {
        format!("mount-{name}.toml")
    }
}

/// Create a fresh deployment in `dir`, including the genesis root.
pub fn init_fs(dir: &Path, opts: &InitOptions) -> Result<InitSummary, HarnessError> {
    if opts.users.is_empty() {
        return Err(HarnessError::Invalid("at least one user is required".into()));
    }
    let existing: Vec<_> = OWNED
        .iter()
        .map(|f| dir.join(f))
        .chain([dir.join("revoked.txt")])
        .filter(|p| p.exists())
        .collect();
    if !existing.is_empty() {
        if !opts.force {
            return Err(HarnessError::Invalid(format!(
                "{} already exists (use --force to overwrite)",
                existing[0].display()
            )));
        }
        for p in existing {
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else {
                fs::remove_file(&p)?;
            }
        }
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with("mount-") && name.ends_with(".toml") {
                fs::remove_file(&p)?;
            }
        }
    }
    let keys = dir.join("keys");
    fs::create_dir_all(&keys)?;
    fs::create_dir_all(dir.join("store"))?;
    let mut files = Vec::new();
    let mut note = |p: PathBuf| {
        files.push(p.strip_prefix(dir).map(Path::to_owned).unwrap_or(p));
    };

    let ik = CapsuleWriteKey::generate(opts.scheme);
    let dk = CapsuleWriteKey::generate(opts.scheme);
    let admin = KeyPair::generate(opts.scheme);
    for (name, key) in [("inodes", &ik), ("data", &dk)] {
        key.save(&keys.join(format!("{name}.wkey")))?;
        key.verifying_key().save(&keys.join(format!("{name}.pub")))?;
        key.read_key().save(&keys.join(format!("{name}.rkey")))?;
        for ext in ["wkey", "pub", "rkey"] {
            note(keys.join(format!("{name}.{ext}")));
        }
    }
    admin.save(&keys.join("admin.key"))?;
    note(keys.join("admin.key"));
    let mut members = Vec::new();
    for u in &opts.users {
        let kp = KeyPair::generate(opts.scheme);
        kp.save(&keys.join(format!("{}.key", u.name)))?;
        note(keys.join(format!("{}.key", u.name)));
        if u.member {
            members.push(Identity::new(*kp.public(), u.uid));
        }
    }

    let meta = |name: &str, key: &CapsuleWriteKey| CapsuleMetadata {
        name: name.into(),
        block_size: opts.block_size as u32,
        writer_key: *key.verifying_key(),
        nonce: 0,
    };
    let (im, dm) = (meta("inodes", &ik), meta("data", &dk));
    let (inode_id, data_id) = (im.capsule_id(), dm.capsule_id());

    let capsule_cfg = CapsuleServerConfig {
        listen: opts.capsule_listen.clone(),
        store_dir: "store".into(),
        sync: true,
        follower_of: None,
        capsules: [("inodes", &im), ("data", &dm)]
            .into_iter()
            .map(|(name, m)| CapsuleEntry {
                name: name.into(),
                block_size: m.block_size,
                writer_key: format!("keys/{name}.pub").into(),
                nonce: m.nonce,
                capsule_id: Some(m.capsule_id().to_hex()),
            })
            .collect(),
    };
    capsule_cfg.save(&dir.join("capsule.toml"))?;
    note(dir.join("capsule.toml"));

    let mw_cfg = MiddlewareConfig {
        listen: opts.middleware_listen.clone(),
        capsule_server: opts.capsule_listen.clone(),
        inode_capsule: inode_id.to_hex(),
        data_capsule: data_id.to_hex(),
        inode_write_key: "keys/inodes.wkey".into(),
        data_write_key: "keys/data.wkey".into(),
        admin_key: "keys/admin.key".into(),
        revocation_list: "revoked.txt".into(),
        block_size: opts.block_size,
        policy: PolicyConfig::default(),
    };
    mw_cfg.save(&dir.join("middleware.toml"))?;
    note(dir.join("middleware.toml"));

    for (i, u) in opts.users.iter().enumerate() {
        let m = MountConfig {
            capsule_server: opts.capsule_listen.clone(),
            middleware: opts.middleware_listen.clone(),
            inode_capsule: inode_id.to_hex(),
            data_capsule: data_id.to_hex(),
            inode_read_key: "keys/inodes.rkey".into(),
            data_read_key: "keys/data.rkey".into(),
            client_key: format!("keys/{}.key", u.name).into(),
            uid: u.uid,
            journal_dir: format!("journal/{}", u.name).into(),
            block_size: opts.block_size,
            nobody_uid: DEFAULT_NOBODY_UID,
            advisory_checks: true,
            coalesce: true,
            sync_journal: true,
            flush_retries: 5,
            cache: CacheSection::default(),
        };
        let f = dir.join(mount_file(i, &u.name));
        m.save(&f)?;
        note(f);
    }

    // Genesis: host the new stores locally just long enough to write root.
    let server = Arc::new(CapsuleServer::new());
    server.host(CapsuleStore::open(im.clone(), &store_path(&dir.join("store"), &im), true)?);
    server.host(CapsuleStore::open(dm.clone(), &store_path(&dir.join("store"), &dm), true)?);
    let mw = Middleware::start(MiddlewareSetup {
        server,
        inode_capsule: inode_id,
        inode_key: ik,
        data_capsule: data_id,
        data_key: dk,
        block_size: opts.block_size,
        admin,
        policy: Default::default(),
        revocation_list: Some(dir.join("revoked.txt")),
    })?;
    let root = mw.init_root(&members)?;
    note(store_path(&dir.join("store"), &im));
    note(store_path(&dir.join("store"), &dm));
    Ok(InitSummary {
        dir: dir.to_owned(),
        inode_capsule: inode_id.to_hex(),
        data_capsule: data_id.to_hex(),
        root: root.to_hex(),
        files,
    })
}

/// Capsule server with every configured store opened from disk.
pub fn open_capsule_server(path: &Path) -> Result<(Arc<CapsuleServer>, Vec<Arc<CapsuleStore>>, CapsuleServerConfig), HarnessError> {
    let cfg = CapsuleServerConfig::load(path)?;
    fs::create_dir_all(&cfg.store_dir)?;
    let server = Arc::new(CapsuleServer::new());
    let mut stores = Vec::new();
    for meta in cfg.metadata(path)? {
        let file = store_path(&cfg.store_dir, &meta);
        let mut store = CapsuleStore::open(meta, &file, cfg.sync)?;
        if cfg.follower_of.is_some() {
            store = store.into_follower();
        }
        stores.push(server.host(store));
    }
    Ok((server, stores, cfg))
}

/// Middleware connected to the capsule server named in its config.
pub fn start_middleware(path: &Path) -> Result<(Middleware, MiddlewareConfig), HarnessError> {
    let cfg = MiddlewareConfig::load(path)?;
    let (inode_capsule, data_capsule) = cfg.capsule_ids(path)?;
    let remote = RemoteService::new(cfg.capsule_server.as_str())
        .map_err(|e| HarnessError::Boot(format!("capsule server {}: {e}", cfg.capsule_server)))?;
    let mw = Middleware::start(MiddlewareSetup {
        server: Arc::new(remote),
        inode_capsule,
        inode_key: CapsuleWriteKey::load(&cfg.inode_write_key)?,
        data_capsule,
        data_key: CapsuleWriteKey::load(&cfg.data_write_key)?,
        block_size: cfg.block_size,
        admin: KeyPair::load(&cfg.admin_key)?,
        policy: (&cfg.policy).into(),
        revocation_list: Some(cfg.revocation_list.clone()),
    })?;
    Ok((mw, cfg))
}

/// Client mounted from a mount config, optionally as a read-only snapshot.
pub fn mount_from_config(path: &Path, snapshot_ts: Option<u64>) -> Result<(Client, MountConfig), HarnessError> {
    let cfg = MountConfig::load(path)?;
    let (inode_capsule, data_capsule) = cfg.capsule_ids(path)?;
    let boot = |what: &str, addr: &str, e: std::io::Error| HarnessError::Boot(format!("{what} {addr}: {e}"));
    let capsules = RemoteService::new(cfg.capsule_server.as_str()).map_err(|e| boot("capsule server", &cfg.capsule_server, e))?;
    let writer = RemoteService::new(cfg.middleware.as_str()).map_err(|e| boot("middleware", &cfg.middleware, e))?;
    let client = Client::mount(ClientSetup {
        capsules: Arc::new(capsules),
        writer: Arc::new(writer),
        inode_capsule,
        data_capsule,
        inode_key: CapsuleReadKey::load(&cfg.inode_read_key)?,
        data_key: CapsuleReadKey::load(&cfg.data_read_key)?,
        keypair: KeyPair::load(&cfg.client_key)?,
        journal_dir: if snapshot_ts.is_some() { None } else { Some(cfg.journal_dir.clone()) },
        config: cfg.client_config(),
        snapshot_ts,
    })?;
    Ok((client, cfg))
}

/// Public key of a key file of any kind we write.
pub fn public_key_of(path: &Path) -> Result<PublicKey, HarnessError> {
    if let Ok(kp) = KeyPair::load(path) {
        return Ok(*kp.public());
    }
    Ok(PublicKey::load(path)?)
}

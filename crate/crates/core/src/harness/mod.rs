// SPDX-License-Identifier: Apache-2.0

//! Test and evaluation apparatus: a bootable stack (in-process or over
//! TCP), a redundant admission auditor, attack scenarios, the PUT fuzzer,
//! convergence and crash-recovery drivers, benchmarks and the workload
//! script runner.

pub mod attack;
pub mod audit;
pub mod bench;
pub mod converge;
pub mod corpus;
pub mod crash;
pub mod fuzz;
pub mod init;
pub mod workload;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use crate::block::{Identity, InodeNumber, Uid, DEFAULT_BLOCK_SIZE};
use crate::client::{Client, ClientConfig, ClientSetup, FsError};
use crate::codec::Canonical;
use crate::crypto::{CapsuleReadKey, CapsuleWriteKey, Digest, KeyPair, Scheme};
use crate::middleware::{Middleware, MiddlewarePolicy, MiddlewareSetup, PutRequest, RevokeRequest};
use crate::net::{Handlers, NetServer, RemoteService};
use crate::server::{CapsuleMetadata, CapsuleServer, CapsuleStore};
use crate::service::{ByteTamper, CapsuleError, CapsuleService, PutError, PutReceipt, WriteService};

use self::audit::ShadowAudit;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("stack boot failed: {0}")]
    Boot(String),
    #[error("filesystem error: {0}")]
    Fs(#[from] FsError),
    #[error("capsule error: {0}")]
    Capsule(#[from] CapsuleError),
    #[error("write error: {0}")]
    Put(#[from] PutError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    Tcp,
}

#[derive(Clone, Debug)]
pub struct UserSpec {
    pub name: String,
    pub uid: Uid,
    /// Listed in the root directory's ACL.
    pub member: bool,
}

impl UserSpec {
    pub fn member(name: &str, uid: Uid) -> Self {
        Self {
            name: name.into(),
            uid,
            member: true,
        }
    }

    pub fn outsider(name: &str, uid: Uid) -> Self {
        Self {
            name: name.into(),
            uid,
            member: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StackOptions {
    pub scheme: Scheme,
    pub block_size: usize,
    pub transport: Transport,
    pub policy: MiddlewarePolicy,
    pub users: Vec<UserSpec>,
    /// Attach the shadow auditor to both stores.
    pub audit: bool,
}

impl Default for StackOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::Ed25519,
            block_size: DEFAULT_BLOCK_SIZE,
            transport: Transport::InProcess,
            policy: MiddlewarePolicy::default(),
            users: vec![UserSpec::member("alice", 1000), UserSpec::member("bob", 2000)],
            audit: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct User {
    pub name: String,
    pub key: KeyPair,
    pub uid: Uid,
}

impl User {
    pub fn identity(&self) -> Identity {
        Identity::new(*self.key.public(), self.uid)
    }
}

/// Counts client PUTs, per claimed inode.
#[derive(Default, Debug)]
pub struct PutCounter {
    total: AtomicU64,
    per_inode: Mutex<HashMap<InodeNumber, u64>>,
}

impl PutCounter {
    fn note(&self, request: &[u8]) {
        self.total.fetch_add(1, Ordering::SeqCst);
        if let Ok(r) = PutRequest::decode(request) {
            *self.per_inode.lock().unwrap().entry(r.claimed_inode).or_default() += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.total.load(Ordering::SeqCst)
    }

    pub fn for_inode(&self, n: InodeNumber) -> u64 {
        self.per_inode.lock().unwrap().get(&n).copied().unwrap_or(0)
    }

    pub fn reset(&self) {
        self.total.store(0, Ordering::SeqCst);
        self.per_inode.lock().unwrap().clear();
    }
}

/// The client-side write path: counts, then optionally tampers.
struct ClientWritePath {
    inner: Arc<dyn WriteService>,
    counter: Arc<PutCounter>,
    tamper: Arc<RwLock<Option<ByteTamper>>>,
}

impl WriteService for ClientWritePath {
    fn put(&self, request: &[u8]) -> Result<PutReceipt, PutError> {
        self.counter.note(request);
        let mut bytes = request.to_vec();
        if let Some(hook) = self.tamper.read().unwrap().as_ref() {
            hook(&mut bytes);
        }
        self.inner.put(&bytes)
    }

    fn revoke(&self, request: &[u8]) -> Result<u64, PutError> {
        self.inner.revoke(request)
    }
}

/// A complete deployment: capsule server, middleware and client plumbing.
pub struct Stack {
    pub options: StackOptions,
    pub server: Arc<CapsuleServer>,
    pub middleware: Arc<Middleware>,
    pub inode_capsule: Digest,
    pub data_capsule: Digest,
    pub inode_read: CapsuleReadKey,
    pub data_read: CapsuleReadKey,
    pub admin: KeyPair,
    pub users: BTreeMap<String, User>,
    pub audit: Arc<ShadowAudit>,
    pub puts: Arc<PutCounter>,
    client_capsules: Arc<dyn CapsuleService>,
    client_writer: Arc<dyn WriteService>,
    tamper: Arc<RwLock<Option<ByteTamper>>>,
    net: Vec<NetServer>,
    dir: tempfile::TempDir,
}

impl Stack {
    pub fn boot(options: StackOptions) -> Result<Self, HarnessError> {
        let boot = |e: &dyn std::fmt::Display| HarnessError::Boot(e.to_string());
        let scheme = options.scheme;
        let server = Arc::new(CapsuleServer::new());
        let ik = CapsuleWriteKey::generate(scheme);
        let dk = CapsuleWriteKey::generate(scheme);
        let meta = |name: &str, key: &CapsuleWriteKey| CapsuleMetadata {
            name: name.into(),
            block_size: options.block_size as u32,
            writer_key: *key.verifying_key(),
            nonce: 0,
        };
        let inode_store = server.host(CapsuleStore::in_memory(meta("inodes", &ik)));
        let data_store = server.host(CapsuleStore::in_memory(meta("data", &dk)));
        let admin = KeyPair::generate(scheme);
        let users: BTreeMap<String, User> = options
            .users
            .iter()
            .map(|u| {
                (
                    u.name.clone(),
                    User {
                        name: u.name.clone(),
                        key: KeyPair::generate(scheme),
                        uid: u.uid,
                    },
                )
            })
            .collect();
        let audit = Arc::new(ShadowAudit::new(
            inode_store.id(),
            ik.read_key(),
            data_store.id(),
            dk.read_key(),
            Identity::new(*admin.public(), crate::middleware::ADMIN_UID),
        ));
        if options.audit {
            inode_store.set_audit(Some(audit.clone()));
            data_store.set_audit(Some(audit.clone()));
        }

        let mut net = Vec::new();
        let mw_server: Arc<dyn CapsuleService> = match options.transport {
            Transport::InProcess => server.clone(),
            Transport::Tcp => {
                let ns = NetServer::bind(
                    "127.0.0.1:0",
                    Handlers {
                        capsules: Some(server.clone()),
                        writer: None,
                    },
                )?;
                let remote = Arc::new(RemoteService::new(ns.local_addr())?);
                net.push(ns);
                remote
            }
        };
        let mw = Middleware::start(MiddlewareSetup {
            server: mw_server.clone(),
            inode_capsule: inode_store.id(),
            inode_key: ik.clone(),
            data_capsule: data_store.id(),
            data_key: dk.clone(),
            block_size: options.block_size,
            admin: admin.clone(),
            policy: options.policy,
            revocation_list: None,
        })
        .map_err(|e| boot(&e))?;
        let members: Vec<Identity> = options
            .users
            .iter()
            .filter(|u| u.member)
            .map(|u| users[&u.name].identity())
            .collect();
        mw.init_root(&members).map_err(|e| boot(&e))?;
        let mw = Arc::new(mw);
        let (client_capsules, mw_writer): (Arc<dyn CapsuleService>, Arc<dyn WriteService>) = match options.transport {
            Transport::InProcess => (server.clone(), mw.clone()),
            Transport::Tcp => {
                let ns = NetServer::bind(
                    "127.0.0.1:0",
                    Handlers {
                        capsules: None,
                        writer: Some(mw.clone()),
                    },
                )?;
                let w = Arc::new(RemoteService::new(ns.local_addr())?);
                net.push(ns);
                (mw_server, w)
            }
        };
        let puts = Arc::new(PutCounter::default());
        let tamper = Arc::new(RwLock::new(None));
        let client_writer = Arc::new(ClientWritePath {
            inner: mw_writer,
            counter: puts.clone(),
            tamper: tamper.clone(),
        });
        Ok(Self {
            options,
            inode_capsule: inode_store.id(),
            data_capsule: data_store.id(),
            server,
            middleware: mw,
            inode_read: ik.read_key(),
            data_read: dk.read_key(),
            admin,
            users,
            audit,
            puts,
            client_capsules,
            client_writer,
            tamper,
            net,
            dir: tempfile::tempdir()?,
        })
    }

    pub fn user(&self, name: &str) -> &User {
        self.users
            .get(name)
            .unwrap_or_else(|| panic!("no user named {name}"))
    }

    pub fn add_user(&mut self, name: &str, uid: Uid) -> &User {
        let user = User {
            name: name.into(),
            key: KeyPair::generate(self.options.scheme),
            uid,
        };
        self.users.insert(name.into(), user);
        &self.users[name]
    }

    pub fn dir(&self) -> &Path {
        self.dir.path()
    }

    pub fn journal_dir(&self, journal: &str) -> PathBuf {
        self.dir.path().join("journals").join(journal)
    }

    /// Client config matching the stack's block size.
    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            block_size: self.options.block_size,
            ..ClientConfig::default()
        }
    }

    pub fn setup_for(&self, key: &KeyPair, journal: &str, config: ClientConfig) -> ClientSetup {
        ClientSetup {
            capsules: self.client_capsules.clone(),
            writer: self.client_writer.clone(),
            inode_capsule: self.inode_capsule,
            data_capsule: self.data_capsule,
            inode_key: self.inode_read.clone(),
            data_key: self.data_read.clone(),
            keypair: key.clone(),
            journal_dir: Some(self.journal_dir(journal)),
            config,
            snapshot_ts: None,
        }
    }

    /// Mount a client for `user`, journaling into `journal`. Mounting the
    /// same journal name again resumes it.
    pub fn mount(&self, user: &str, journal: &str, config: ClientConfig) -> Result<Client, FsError> {
        Client::mount(self.setup_for(&self.user(user).key, journal, config))
    }

    pub fn mount_default(&self, user: &str) -> Result<Client, FsError> {
        self.mount(user, user, self.client_config())
    }

    /// Tamper with every client PUT on its way to the middleware.
    pub fn set_put_tamper(&self, hook: Option<ByteTamper>) {
        *self.tamper.write().unwrap() = hook;
    }

    pub fn inode_store(&self) -> Arc<CapsuleStore> {
        self.server.store(&self.inode_capsule).expect("inode capsule hosted")
    }

    pub fn data_store(&self) -> Arc<CapsuleStore> {
        self.server.store(&self.data_capsule).expect("data capsule hosted")
    }

    pub fn writer(&self) -> Arc<dyn WriteService> {
        self.client_writer.clone()
    }

    pub fn capsules(&self) -> Arc<dyn CapsuleService> {
        self.client_capsules.clone()
    }

    /// Revoke a user's key through the wire protocol, signed by the admin.
    pub fn revoke(&self, user: &str, scrub: bool) -> Result<u64, PutError> {
        let key_id = self.user(user).key.key_id();
        self.audit.note_revoked(key_id);
        let req = RevokeRequest::sign(key_id, scrub, &self.admin);
        self.client_writer.revoke(&req.encode())
    }

    pub fn is_tcp(&self) -> bool {
        !self.net.is_empty()
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Filesystem client.
//!
//! Metadata comes from the inode capsule: every block is verified (Merkle
//! proof, decryption, middleware and client signatures) and the winner per
//! inode is picked by timestamp. Mutations go to the local [`Journal`] and
//! return once durable; [`Client::flush`] drains the journal through the
//! middleware. Pending journal state is overlaid on the cache, so a client
//! always reads its own writes.

mod cache;

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{error, warn};
use thiserror::Error;

use crate::block::{
    acl_permits, build_cfs_block, inherit_acl, Acl, BlockBody, CfsBlock, DataBlock, Identity,
    InodeBlock, InodeKind, InodeNumber, OuterBlock, Uid, DEFAULT_BLOCK_SIZE, DEFAULT_NOBODY_UID,
    ROOT_INODE,
};
use crate::block_cache::{BlockCache, CacheConfig};
use crate::codec::Canonical;
use crate::crypto::{hash, CapsuleReadKey, Digest, KeyPair};
use crate::fetch::fetch_verified;
use crate::journal::{changes, Journal, JournalEntry, JournalError, JournalOptions, INODE_SENTINEL};
use crate::middleware::PutRequest;
use crate::service::{CapsuleError, CapsuleService, PutError, PutReceipt, RejectionKind, Subscription, WriteService};

pub use cache::InodeCache;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FsError {
    #[error("no such file or directory")]
    NotFound,
    #[error("not a directory")]
    NotADirectory,
    #[error("is a directory")]
    IsADirectory,
    #[error("file exists")]
    Exists,
    #[error("directory not empty")]
    NotEmpty,
    #[error("permission denied")]
    PermissionDenied,
    #[error("read-only filesystem")]
    ReadOnly,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("mount failed: {0}")]
    Mount(String),
    /// Injected by a [`CrashPlan`]; the client must be discarded.
    #[error("simulated crash")]
    Crashed,
}

impl From<JournalError> for FsError {
    fn from(e: JournalError) -> Self {
        FsError::Io(e.to_string())
    }
}

impl From<CapsuleError> for FsError {
    fn from(e: CapsuleError) -> Self {
        FsError::Io(e.to_string())
    }
}

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub block_size: usize,
    pub nobody_uid: Uid,
    /// Fail fast on ACL violations the middleware would reject anyway.
    pub advisory_checks: bool,
    /// Read every data block from the server.
    pub bypass_cache: bool,
    /// Rebase attempts on stale-inode before a write is parked.
    pub flush_retries: usize,
    pub journal: JournalOptions,
    pub cache: CacheConfig,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            nobody_uid: DEFAULT_NOBODY_UID,
            advisory_checks: true,
            bypass_cache: false,
            flush_retries: 5,
            journal: JournalOptions::default(),
            cache: CacheConfig::default(),
        }
    }
}

/// Everything a client needs to mount.
#[derive(Clone)]
pub struct ClientSetup {
    pub capsules: Arc<dyn CapsuleService>,
    pub writer: Arc<dyn WriteService>,
    pub inode_capsule: Digest,
    pub data_capsule: Digest,
    pub inode_key: CapsuleReadKey,
    pub data_key: CapsuleReadKey,
    pub keypair: KeyPair,
    /// Required unless mounting a snapshot.
    pub journal_dir: Option<PathBuf>,
    pub config: ClientConfig,
    pub snapshot_ts: Option<u64>,
}

/// Fault injection for crash-recovery tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct CrashPlan {
    /// Crash instead of sending PUT number `n + 1`.
    pub stop_after_puts: Option<u64>,
    /// With `stop_after_puts`, crash right after PUT `n` is acknowledged,
    /// before its commit is recorded.
    pub crash_after_ack: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attr {
    pub inode: InodeNumber,
    pub kind: InodeKind,
    pub size: u64,
    pub uid: Uid,
    pub nlink: u64,
    /// Timestamp of the committed version, 0 if never committed.
    pub mtime_us: u64,
    pub pending: bool,
    pub acl: Acl,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirEntry {
    pub name: String,
    pub inode: InodeNumber,
    pub kind: InodeKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlushReport {
    pub puts: u64,
    pub inodes_committed: u64,
    pub rebases: u64,
    pub coalesced: usize,
    /// Writes abandoned or parked, with the reason.
    pub failures: Vec<(InodeNumber, String)>,
}

#[derive(Default, Debug)]
pub struct ClientStats {
    pub server_gets: AtomicU64,
    pub journal_hits: AtomicU64,
    pub cache_hits: AtomicU64,
    pub puts: AtomicU64,
}

const STRIPES: usize = 64;

pub struct Client {
    capsules: Arc<dyn CapsuleService>,
    writer: Arc<dyn WriteService>,
    inode_capsule: Digest,
    data_capsule: Digest,
    inode_key: CapsuleReadKey,
    data_key: CapsuleReadKey,
    keypair: KeyPair,
    config: ClientConfig,
    cache: RwLock<InodeCache>,
    sub: Mutex<Box<dyn Subscription>>,
    journal: Option<Journal>,
    /// Latest pending inode body and accumulated change bits.
    overlay: RwLock<HashMap<InodeNumber, (InodeBlock, u8)>>,
    blocks: BlockCache,
    inode_prefix: u64,
    next_inode: AtomicU64,
    stripes: Vec<Mutex<()>>,
    flush_lock: Mutex<()>,
    crash: Mutex<CrashPlan>,
    pub stats: ClientStats,
    failures: Mutex<Vec<(InodeNumber, String)>>,
}

/// Current state of one inode as this client sees it.
#[derive(Clone, Debug)]
struct Current {
    block: InodeBlock,
    /// Digest and timestamp of the committed winner, if any.
    committed: Option<(Digest, u64)>,
    pending_changes: Option<u8>,
}

impl Current {
    /// The version a new change should be based on.
    fn base(&self) -> Option<Digest> {
        match self.pending_changes {
            Some(_) => self.block.version_of,
            None => self.committed.map(|(d, _)| d),
        }
    }
}

enum Stop {
    Transport(String),
    Crashed,
}

impl From<Stop> for FsError {
    fn from(s: Stop) -> Self {
        match s {
            Stop::Transport(m) => FsError::Io(m),
            Stop::Crashed => FsError::Crashed,
        }
    }
}

fn valid_name(name: &str) -> Result<(), FsError> {
    if name.is_empty() || name.contains('/') || name == "." || name == ".." {
        return Err(FsError::InvalidArgument(format!("bad file name {name:?}")));
    }
    Ok(())
}

/// Move `ours` onto `winner`, keeping only the fields `changes` says we
/// touched. `None` if the winner deleted the inode and we did not.
pub fn rebase(ours: &InodeBlock, change_bits: u8, winner: &InodeBlock, winner_digest: Digest) -> Option<InodeBlock> {
    let mut out = if change_bits & changes::CREATE != 0 {
        ours.clone()
    } else {
        if winner.deleted && change_bits & changes::DELETED == 0 {
            return None;
        }
        let mut b = winner.clone();
        if change_bits & changes::DATA != 0 {
            b.size = ours.size;
            b.data_hashes = ours.data_hashes.clone();
        }
        if change_bits & changes::ACL != 0 {
            b.acl = ours.acl.clone();
        }
        if change_bits & changes::NAME != 0 {
            b.name = ours.name.clone();
            b.parent_inode = ours.parent_inode;
        }
        if change_bits & changes::DELETED != 0 {
            b.deleted = ours.deleted;
        }
        b
    };
    out.updated_by = ours.updated_by;
    out.version_of = Some(winner_digest);
    Some(out)
}

impl Client {
    /// Rebuild the inode cache from the capsule and open the journal.
    pub fn mount(setup: ClientSetup) -> Result<Self, FsError> {
        let ClientSetup {
            capsules,
            writer,
            inode_capsule,
            data_capsule,
            inode_key,
            data_key,
            keypair,
            journal_dir,
            config,
            snapshot_ts,
        } = setup;
        let cache = Self::rebuild(&capsules, &inode_capsule, &inode_key, snapshot_ts)?;
        let mut cache_state = cache.0;
        let sub = cache.1;
        let journal = match (snapshot_ts, journal_dir) {
            (Some(_), _) => None,
            (None, Some(dir)) => Some(Journal::open(&dir, config.journal)?),
            (None, None) => return Err(FsError::Mount("a writable mount needs a journal directory".into())),
        };
        let blocks = BlockCache::new(&config.cache).map_err(|e| FsError::Mount(format!("block cache: {e}")))?;
        let id = hash(keypair.key_id().as_bytes());
        let prefix = (u64::from(id.0[0]) << 16 | u64::from(id.0[1]) << 8 | u64::from(id.0[2])) | 0x80_0000;
        let inode_prefix = prefix << 40;
        let client = Self {
            capsules,
            writer,
            inode_capsule,
            data_capsule,
            inode_key,
            data_key,
            keypair,
            config,
            cache: RwLock::new(std::mem::take(&mut cache_state)),
            sub: Mutex::new(sub),
            journal,
            overlay: RwLock::new(HashMap::new()),
            blocks,
            inode_prefix,
            next_inode: AtomicU64::new(1),
            stripes: (0..STRIPES).map(|_| Mutex::new(())).collect(),
            flush_lock: Mutex::new(()),
            crash: Mutex::new(CrashPlan::default()),
            stats: ClientStats::default(),
            failures: Mutex::new(Vec::new()),
        };
        client.reload_overlay();
        client.init_allocator();
        Ok(client)
    }

    /// Walk the whole inode capsule and verify every block.
    pub fn rebuild(
        capsules: &Arc<dyn CapsuleService>,
        inode_capsule: &Digest,
        key: &CapsuleReadKey,
        snapshot_ts: Option<u64>,
    ) -> Result<(InodeCache, Box<dyn Subscription>), FsError> {
        let unreachable = |e: CapsuleError| FsError::Mount(format!("inode capsule unreachable: {e}"));
        let len = capsules.len(inode_capsule).map_err(unreachable)?;
        let mut sub = capsules.subscribe(inode_capsule, 0).map_err(unreachable)?;
        let mut cache = InodeCache::new(snapshot_ts);
        cache
            .catch_up(capsules.as_ref(), inode_capsule, key, sub.as_mut(), len)
            .map_err(unreachable)?;
        if len > 0 && cache.rejected.get("decryption").copied() == Some(len) {
            return Err(FsError::Mount("read key does not match the inode capsule".into()));
        }
        if cache.view.live(ROOT_INODE).is_none() {
            return Err(FsError::Mount("inode capsule has no root directory".into()));
        }
        Ok((cache, sub))
    }

    fn reload_overlay(&self) {
        let Some(j) = &self.journal else { return };
        let mut overlay = self.overlay.write().unwrap();
        overlay.clear();
        for n in j.inodes_in_order() {
            if let Some(l) = j.latest_inode(n).filter(|l| l.final_digest.is_none()) {
                if let BlockBody::Inode(b) = &l.entry.body.body {
                    overlay.insert(n, (b.clone(), l.entry.changes));
                }
            }
        }
    }

    fn refresh_overlay(&self, n: InodeNumber) {
        let Some(j) = &self.journal else { return };
        let mut overlay = self.overlay.write().unwrap();
        match j.latest_inode(n).filter(|l| l.final_digest.is_none()) {
            Some(l) => {
                if let BlockBody::Inode(b) = &l.entry.body.body {
                    overlay.insert(n, (b.clone(), l.entry.changes));
                }
            }
            None => {
                overlay.remove(&n);
            }
        }
    }

    fn init_allocator(&self) {
        let mask = (1u64 << 40) - 1;
        let mut max = 0;
        let mut consider = |n: InodeNumber| {
            if n & !mask == self.inode_prefix {
                max = max.max(n & mask);
            }
        };
        for e in self.cache.read().unwrap().view.inodes() {
            consider(e.block.inode_number);
        }
        for n in self.overlay.read().unwrap().keys() {
            consider(*n);
        }
        self.next_inode.store(max + 1, Ordering::SeqCst);
    }

    fn allocate_inode(&self) -> InodeNumber {
        self.inode_prefix | self.next_inode.fetch_add(1, Ordering::SeqCst)
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn keypair(&self) -> &KeyPair {
        &self.keypair
    }

    pub fn identity(&self, uid: Uid) -> Identity {
        Identity::new(*self.keypair.public(), uid)
    }

    pub fn is_read_only(&self) -> bool {
        self.journal.is_none()
    }

    pub fn snapshot_ts(&self) -> Option<u64> {
        self.cache.read().unwrap().snapshot_ts()
    }

    pub fn journal(&self) -> Option<&Journal> {
        self.journal.as_ref()
    }

    pub fn block_cache(&self) -> &BlockCache {
        &self.blocks
    }

    pub fn set_crash_plan(&self, plan: CrashPlan) {
        *self.crash.lock().unwrap() = plan;
    }

    /// A copy of the verified inode cache (without journal overlay).
    pub fn inode_cache(&self) -> InodeCache {
        self.cache.read().unwrap().clone()
    }

    pub fn view_digests(&self) -> HashMap<InodeNumber, Digest> {
        self.cache.read().unwrap().view.digests()
    }

    /// Writes abandoned or parked by past flushes.
    pub fn failures(&self) -> Vec<(InodeNumber, String)> {
        self.failures.lock().unwrap().clone()
    }

    /// Local uid for a block author: only our own key keeps its uid.
    pub fn map_author(&self, author: &Identity) -> Uid {
        map_author(author, self.keypair.public(), self.config.nobody_uid)
    }

    /// Read-only view of the filesystem as of `ts`.
    pub fn snapshot(&self, ts: u64) -> Result<Client, FsError> {
        Client::mount(ClientSetup {
            capsules: Arc::clone(&self.capsules),
            writer: Arc::clone(&self.writer),
            inode_capsule: self.inode_capsule,
            data_capsule: self.data_capsule,
            inode_key: self.inode_key.clone(),
            data_key: self.data_key.clone(),
            keypair: self.keypair.clone(),
            journal_dir: None,
            config: self.config.clone(),
            snapshot_ts: Some(ts),
        })
    }

    /// Pull new inode-capsule blocks into the cache.
    pub fn sync(&self) -> Result<usize, FsError> {
        let len = self.capsules.len(&self.inode_capsule)?;
        let mut sub = self.sub.lock().unwrap();
        let mut cache = self.cache.write().unwrap();
        let n = cache.catch_up(
            self.capsules.as_ref(),
            &self.inode_capsule,
            &self.inode_key,
            sub.as_mut(),
            len,
        )?;
        Ok(n)
    }

    fn stripe(&self, n: InodeNumber) -> MutexGuard<'_, ()> {
        self.stripes[(n % STRIPES as u64) as usize].lock().unwrap()
    }

    fn writable(&self) -> Result<&Journal, FsError> {
        self.journal.as_ref().ok_or(FsError::ReadOnly)
    }

    fn current(&self, n: InodeNumber) -> Option<Current> {
        let cache = self.cache.read().unwrap();
        let committed = cache.view.get(n).map(|e| (e.digest(), e.timestamp()));
        let pending = self.overlay.read().unwrap().get(&n).cloned();
        let cur = match pending {
            Some((block, ch)) => Current {
                block,
                committed,
                pending_changes: Some(ch),
            },
            None => Current {
                block: cache.view.get(n)?.block.clone(),
                committed,
                pending_changes: None,
            },
        };
        (!cur.block.deleted).then_some(cur)
    }

    /// `(name, inode)` pairs under `parent` including pending changes.
    fn children_of(&self, parent: InodeNumber) -> BTreeSet<(String, InodeNumber)> {
        let cache = self.cache.read().unwrap();
        let overlay = self.overlay.read().unwrap();
        let mut out: BTreeSet<(String, InodeNumber)> = cache
            .view
            .children(parent)
            .into_iter()
            .filter(|(_, n)| !overlay.contains_key(n))
            .collect();
        for (n, (b, _)) in overlay.iter() {
            if !b.deleted && b.parent_inode == parent {
                out.insert((b.name.clone(), *n));
            }
        }
        out
    }

    fn child(&self, parent: InodeNumber, name: &str) -> Option<InodeNumber> {
        self.children_of(parent)
            .into_iter()
            .filter(|(n, _)| n == name)
            .map(|(_, i)| i)
            .min()
    }

    fn check_acl(&self, acl: &Acl, who: &Identity) -> Result<(), FsError> {
        if self.config.advisory_checks && !acl_permits(acl, who) {
            return Err(FsError::PermissionDenied);
        }
        Ok(())
    }

    pub fn lookup(&self, path: &str) -> Result<InodeNumber, FsError> {
        let mut n = ROOT_INODE;
        for comp in path.split('/').filter(|c| !c.is_empty() && *c != ".") {
            let cur = self.current(n).ok_or(FsError::NotFound)?;
            if !cur.block.is_dir() {
                return Err(FsError::NotADirectory);
            }
            n = if comp == ".." {
                if n == ROOT_INODE { n } else { cur.block.parent_inode }
            } else {
                self.child(n, comp).ok_or(FsError::NotFound)?
            };
        }
        self.current(n).map(|_| n).ok_or(FsError::NotFound)
    }

    pub fn getattr(&self, n: InodeNumber) -> Result<Attr, FsError> {
        let cur = self.current(n).ok_or(FsError::NotFound)?;
        let nlink = if cur.block.is_dir() {
            1 + self.children_of(n).len() as u64
        } else {
            1
        };
        Ok(Attr {
            inode: n,
            kind: cur.block.kind,
            size: cur.block.size,
            uid: self.map_author(&cur.block.updated_by),
            nlink,
            mtime_us: cur.committed.map_or(0, |(_, t)| t),
            pending: cur.pending_changes.is_some(),
            acl: cur.block.acl.clone(),
        })
    }

    pub fn readdir(&self, n: InodeNumber) -> Result<Vec<DirEntry>, FsError> {
        let cur = self.current(n).ok_or(FsError::NotFound)?;
        if !cur.block.is_dir() {
            return Err(FsError::NotADirectory);
        }
        Ok(self
            .children_of(n)
            .into_iter()
            .filter_map(|(name, i)| {
                self.current(i).map(|c| DirEntry {
                    name,
                    inode: i,
                    kind: c.block.kind,
                })
            })
            .collect())
    }

    /// Payload of one data block: journal, then cache, then server.
    pub fn read_block(&self, digest: &Digest) -> Result<Vec<u8>, FsError> {
        if let Some(p) = self.journal.as_ref().and_then(|j| j.data_payload(digest)) {
            self.stats.journal_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(p);
        }
        if !self.config.bypass_cache {
            if let Some(bytes) = self.blocks.get(digest) {
                self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                let outer = OuterBlock::decode(&bytes).map_err(|e| FsError::Integrity(e.to_string()))?;
                return match outer.inner.body {
                    BlockBody::Data(d) => Ok(d.payload),
                    BlockBody::Inode(_) => Err(FsError::Integrity("cached block is not data".into())),
                };
            }
        }
        self.stats.server_gets.fetch_add(1, Ordering::Relaxed);
        let opened = fetch_verified(self.capsules.as_ref(), &self.data_capsule, digest, &self.data_key)
            .map_err(|e| {
                if e.is_transport() {
                    FsError::Io(e.to_string())
                } else {
                    warn!("data block {} failed verification: {e}", digest.short());
                    FsError::Integrity(format!("block {}: {e}", digest.short()))
                }
            })?;
        let payload = match &opened.outer.inner.body {
            BlockBody::Data(d) => d.payload.clone(),
            BlockBody::Inode(_) => return Err(FsError::Integrity("expected a data block".into())),
        };
        if !self.config.bypass_cache {
            self.blocks.insert(*digest, opened.outer_bytes);
        }
        Ok(payload)
    }

    pub fn read(&self, n: InodeNumber, offset: u64, len: u64) -> Result<Vec<u8>, FsError> {
        let cur = self.current(n).ok_or(FsError::NotFound)?;
        if cur.block.is_dir() {
            return Err(FsError::IsADirectory);
        }
        let size = cur.block.size;
        let end = size.min(offset.saturating_add(len));
        if offset >= end {
            return Ok(Vec::new());
        }
        let bs = self.config.block_size as u64;
        let mut out = Vec::with_capacity((end - offset) as usize);
        for idx in offset / bs..=(end - 1) / bs {
            let payload = self.read_block(&cur.block.data_hashes[idx as usize])?;
            let start = idx * bs;
            let lo = offset.max(start) - start;
            let hi = end.min(start + payload.len() as u64) - start;
            if lo > hi || hi as usize > payload.len() {
                return Err(FsError::Integrity(format!("block {idx} shorter than the file size")));
            }
            out.extend_from_slice(&payload[lo as usize..hi as usize]);
        }
        if out.len() as u64 != end - offset {
            return Err(FsError::Integrity("file data shorter than its size".into()));
        }
        Ok(out)
    }

    /// Read a whole file.
    pub fn read_all(&self, n: InodeNumber) -> Result<Vec<u8>, FsError> {
        self.read(n, 0, u64::MAX)
    }

    fn sign(&self, body: BlockBody, who: Identity) -> CfsBlock {
        build_cfs_block(body, who, &self.keypair).expect("identity uses the client key")
    }

    /// Enqueue data blocks followed by the new inode version.
    fn enqueue_version(
        &self,
        journal: &Journal,
        data: Vec<(u64, Vec<u8>)>,
        mut body: InodeBlock,
        change_bits: u8,
        who: Identity,
    ) -> Result<(), FsError> {
        let n = body.inode_number;
        let signed_data: Vec<(u64, CfsBlock)> = data
            .into_iter()
            .map(|(idx, payload)| (idx, self.sign(BlockBody::Data(DataBlock { payload }), who)))
            .collect();
        for (idx, b) in &signed_data {
            body.data_hashes[*idx as usize] = crate::journal::placeholder_of(&b.body);
        }
        let inode_block = self.sign(BlockBody::Inode(body.clone()), who);
        journal.enqueue_with(|first| {
            let mut entries: Vec<JournalEntry> = signed_data
                .into_iter()
                .enumerate()
                .map(|(i, (idx, b))| JournalEntry::new(first + i as u64, n, idx, 0, b))
                .collect();
            let seq = first + entries.len() as u64;
            entries.push(JournalEntry::new(seq, n, INODE_SENTINEL, change_bits, inode_block));
            Ok((entries, ()))
        })?;
        self.overlay.write().unwrap().insert(n, (body, change_bits));
        Ok(())
    }

    pub fn write(&self, n: InodeNumber, offset: u64, data: &[u8], uid: Uid) -> Result<usize, FsError> {
        let journal = self.writable()?;
        if data.is_empty() {
            return Ok(0);
        }
        let _g = self.stripe(n);
        let cur = self.current(n).ok_or(FsError::NotFound)?;
        if cur.block.is_dir() {
            return Err(FsError::IsADirectory);
        }
        let who = self.identity(uid);
        self.check_acl(&cur.block.acl, &who)?;

        let bs = self.config.block_size as u64;
        let old_size = cur.block.size;
        let end = offset + data.len() as u64;
        let new_size = old_size.max(end);
        let first = offset.min(old_size) / bs;
        let last = (end - 1) / bs;
        let mut hashes = cur.block.data_hashes.clone();
        hashes.resize(new_size.div_ceil(bs) as usize, Digest::GENESIS);
        let mut blocks = Vec::new();
        for idx in first..=last {
            let start = idx * bs;
            let len = (new_size - start).min(bs) as usize;
            let mut buf = if (idx as usize) < cur.block.data_hashes.len() {
                self.read_block(&cur.block.data_hashes[idx as usize])?
            } else {
                Vec::new()
            };
            buf.resize(len, 0);
            let lo = offset.max(start);
            let hi = end.min(start + bs);
            if lo < hi {
                buf[(lo - start) as usize..(hi - start) as usize]
                    .copy_from_slice(&data[(lo - offset) as usize..(hi - offset) as usize]);
            }
            blocks.push((idx, buf));
        }
        let mut body = cur.block.clone();
        body.size = new_size;
        body.data_hashes = hashes;
        body.updated_by = who;
        body.version_of = cur.base();
        let bits = changes::DATA | cur.pending_changes.unwrap_or(0);
        self.enqueue_version(journal, blocks, body, bits, who)?;
        Ok(data.len())
    }

    /// Shrink or extend (with zeros) a file.
    pub fn truncate(&self, n: InodeNumber, size: u64, uid: Uid) -> Result<(), FsError> {
        let journal = self.writable()?;
        let cur = self.current(n).ok_or(FsError::NotFound)?;
        if cur.block.is_dir() {
            return Err(FsError::IsADirectory);
        }
        if size > cur.block.size {
            let zeros = vec![0u8; (size - cur.block.size) as usize];
            self.write(n, cur.block.size, &zeros, uid)?;
            return Ok(());
        }
        if size == cur.block.size {
            return Ok(());
        }
        let _g = self.stripe(n);
        let cur = self.current(n).ok_or(FsError::NotFound)?;
        let who = self.identity(uid);
        self.check_acl(&cur.block.acl, &who)?;
        let bs = self.config.block_size as u64;
        let keep = size.div_ceil(bs) as usize;
        let mut body = cur.block.clone();
        body.data_hashes.truncate(keep);
        body.size = size;
        body.updated_by = who;
        body.version_of = cur.base();
        let mut blocks = Vec::new();
        if size % bs != 0 {
            let idx = keep - 1;
            let mut buf = self.read_block(&cur.block.data_hashes[idx])?;
            buf.truncate((size % bs) as usize);
            blocks.push((idx as u64, buf));
        }
        let bits = changes::DATA | cur.pending_changes.unwrap_or(0);
        self.enqueue_version(journal, blocks, body, bits, who)
    }

    pub fn create(&self, parent: InodeNumber, name: &str, kind: InodeKind, uid: Uid) -> Result<InodeNumber, FsError> {
        let journal = self.writable()?;
        valid_name(name)?;
        let _g = self.stripe(parent);
        let p = self.current(parent).ok_or(FsError::NotFound)?;
        if !p.block.is_dir() {
            return Err(FsError::NotADirectory);
        }
        let who = self.identity(uid);
        self.check_acl(&p.block.acl, &who)?;
        if self.child(parent, name).is_some() {
            return Err(FsError::Exists);
        }
        let n = self.allocate_inode();
        let body = InodeBlock {
            inode_number: n,
            parent_inode: parent,
            name: name.to_owned(),
            kind,
            deleted: false,
            size: 0,
            data_hashes: Vec::new(),
            acl: inherit_acl(&p.block).map_err(|_| FsError::NotADirectory)?,
            updated_by: who,
            version_of: None,
        };
        self.enqueue_version(journal, Vec::new(), body, changes::CREATE, who)?;
        Ok(n)
    }

    pub fn mkdir(&self, parent: InodeNumber, name: &str, uid: Uid) -> Result<InodeNumber, FsError> {
        self.create(parent, name, InodeKind::Directory, uid)
    }

    pub fn unlink(&self, parent: InodeNumber, name: &str, uid: Uid) -> Result<(), FsError> {
        let journal = self.writable()?;
        let n = self.child(parent, name).ok_or(FsError::NotFound)?;
        let _g = self.stripe(n);
        let cur = self.current(n).ok_or(FsError::NotFound)?;
        if cur.block.is_dir() && !self.children_of(n).is_empty() {
            return Err(FsError::NotEmpty);
        }
        let who = self.identity(uid);
        self.check_acl(&cur.block.acl, &who)?;
        let mut body = cur.block.clone();
        body.deleted = true;
        body.updated_by = who;
        body.version_of = cur.base();
        let bits = changes::DELETED | cur.pending_changes.unwrap_or(0);
        self.enqueue_version(journal, Vec::new(), body, bits, who)
    }

    pub fn rename(
        &self,
        parent: InodeNumber,
        name: &str,
        new_parent: InodeNumber,
        new_name: &str,
        uid: Uid,
    ) -> Result<(), FsError> {
        let journal = self.writable()?;
        valid_name(new_name)?;
        let n = self.child(parent, name).ok_or(FsError::NotFound)?;
        let np = self.current(new_parent).ok_or(FsError::NotFound)?;
        if !np.block.is_dir() {
            return Err(FsError::NotADirectory);
        }
        if self.child(new_parent, new_name).is_some() {
            return Err(FsError::Exists);
        }
        let _g = self.stripe(n);
        let cur = self.current(n).ok_or(FsError::NotFound)?;
        let who = self.identity(uid);
        self.check_acl(&cur.block.acl, &who)?;
        if new_parent != parent {
            self.check_acl(&np.block.acl, &who)?;
        }
        let mut body = cur.block.clone();
        body.parent_inode = new_parent;
        body.name = new_name.to_owned();
        body.updated_by = who;
        body.version_of = cur.base();
        let bits = changes::NAME | cur.pending_changes.unwrap_or(0);
        self.enqueue_version(journal, Vec::new(), body, bits, who)
    }

    /// Replace an inode's ACL. Existing children keep theirs.
    pub fn set_acl(&self, n: InodeNumber, acl: Acl, uid: Uid) -> Result<(), FsError> {
        let journal = self.writable()?;
        if acl.is_empty() {
            return Err(FsError::InvalidArgument("ACL must not be empty".into()));
        }
        let _g = self.stripe(n);
        let cur = self.current(n).ok_or(FsError::NotFound)?;
        let who = self.identity(uid);
        self.check_acl(&cur.block.acl, &who)?;
        let mut body = cur.block.clone();
        body.acl = acl;
        body.updated_by = who;
        body.version_of = cur.base();
        let bits = changes::ACL | cur.pending_changes.unwrap_or(0);
        self.enqueue_version(journal, Vec::new(), body, bits, who)
    }

    pub fn pending(&self) -> usize {
        self.journal.as_ref().map_or(0, Journal::pending_count)
    }

    fn put(&self, req: &PutRequest) -> Result<Result<PutReceipt, PutError>, Stop> {
        let plan = *self.crash.lock().unwrap();
        let done = self.stats.puts.load(Ordering::SeqCst);
        if plan.stop_after_puts.is_some_and(|limit| done >= limit) {
            return Err(Stop::Crashed);
        }
        let res = self.writer.put(&req.encode());
        if let Err(PutError::Transport(m)) = &res {
            return Err(Stop::Transport(m.clone()));
        }
        let done = self.stats.puts.fetch_add(1, Ordering::SeqCst) + 1;
        if plan.crash_after_ack && plan.stop_after_puts == Some(done) {
            return Err(Stop::Crashed);
        }
        Ok(res)
    }

    fn fail(&self, report: &mut FlushReport, n: InodeNumber, reason: String) {
        error!("write to inode {n} abandoned: {reason}");
        report.failures.push((n, reason.clone()));
        self.failures.lock().unwrap().push((n, reason));
    }

    /// Drain the journal through the middleware. Stops at the first
    /// transport error, leaving the remaining entries queued.
    pub fn flush(&self) -> Result<FlushReport, FsError> {
        let journal = self.writable()?;
        let _f = self.flush_lock.lock().unwrap();
        let mut report = FlushReport {
            coalesced: journal.coalesce(),
            ..Default::default()
        };
        for n in journal.inodes_in_order() {
            let _g = self.stripe(n);
            let res = self.flush_inode(journal, n, &mut report);
            self.refresh_overlay(n);
            res?;
        }
        if !report.failures.is_empty() {
            // Rejections usually mean our view is behind.
            if let Err(e) = self.sync() {
                warn!("resync after rejected writes failed: {e}");
            }
        }
        Ok(report)
    }

    fn flush_inode(&self, journal: &Journal, n: InodeNumber, report: &mut FlushReport) -> Result<(), Stop> {
        let entries = journal.entries_for(n);
        let coalescing = journal.options().coalesce;
        let survivor_deleted = entries
            .iter()
            .rev()
            .find(|l| l.entry.is_inode() && !l.dropped)
            .and_then(|l| l.entry.body.body.as_inode().map(|b| b.deleted))
            .unwrap_or(false);
        let all: Vec<u64> = entries.iter().map(|l| l.entry.seq).collect();
        for (i, l) in entries.iter().enumerate() {
            if !l.is_pending() {
                continue;
            }
            if l.entry.is_inode() {
                let body = l.entry.body.body.as_inode().expect("inode entry").clone();
                let known = self.cache.read().unwrap().view.get(n).is_some();
                if body.deleted && !known {
                    // Never committed: nothing to delete.
                    let upto: Vec<u64> = all.iter().copied().filter(|s| *s <= l.entry.seq).collect();
                    journal.purge(&upto).map_err(|e| Stop::Transport(e.to_string()))?;
                    continue;
                }
                if !self.commit_inode_entry(journal, l.entry.seq, body, l.entry.changes, &all, report)? {
                    return Ok(());
                }
            } else {
                if coalescing && survivor_deleted {
                    continue;
                }
                let governing = entries[i..]
                    .iter()
                    .find(|x| x.entry.is_inode() && !x.dropped)
                    .and_then(|x| x.entry.body.body.as_inode().cloned());
                if !self.ensure_inode_exists(journal, n, governing, &all, report)? {
                    return Ok(());
                }
                let req = PutRequest::new(self.data_capsule, &l.entry.body, n, None);
                report.puts += 1;
                match self.put(&req)? {
                    Ok(r) => journal
                        .mark_committed(l.entry.seq, r.digest)
                        .map_err(|e| Stop::Transport(e.to_string()))?,
                    Err(e) => {
                        self.fail(report, n, format!("data block rejected: {e}"));
                        journal.purge(&all).map_err(|e| Stop::Transport(e.to_string()))?;
                        return Ok(());
                    }
                }
            }
        }
        Ok(())
    }

    /// Data blocks need their inode to exist at the middleware. For a new
    /// inode, commit an empty creation stub first.
    fn ensure_inode_exists(
        &self,
        journal: &Journal,
        n: InodeNumber,
        governing: Option<InodeBlock>,
        all: &[u64],
        report: &mut FlushReport,
    ) -> Result<bool, Stop> {
        let state = self.cache.read().unwrap().view.get(n).map(|e| e.block.deleted);
        match state {
            Some(false) => Ok(true),
            Some(true) => {
                self.fail(report, n, "inode was deleted by another writer".into());
                journal.purge(all).map_err(|e| Stop::Transport(e.to_string()))?;
                Ok(false)
            }
            None => {
                let Some(mut stub) = governing else {
                    self.fail(report, n, "data without an inode version".into());
                    journal.purge(all).map_err(|e| Stop::Transport(e.to_string()))?;
                    return Ok(false);
                };
                stub.size = 0;
                stub.data_hashes.clear();
                stub.deleted = false;
                stub.version_of = None;
                let who = stub.updated_by;
                let block = self.sign(BlockBody::Inode(stub.clone()), who);
                let req = PutRequest::new(self.inode_capsule, &block, n, None);
                report.puts += 1;
                match self.put(&req)? {
                    Ok(r) => {
                        self.ingest_committed(r.digest, r.timestamp, stub);
                        Ok(true)
                    }
                    Err(e) => {
                        self.fail(report, n, format!("creation rejected: {e}"));
                        journal.purge(all).map_err(|e| Stop::Transport(e.to_string()))?;
                        Ok(false)
                    }
                }
            }
        }
    }

    /// Pull a just-committed inode version from the server and verify it.
    fn ingest_committed(&self, digest: Digest, timestamp: u64, body: InodeBlock) {
        let mut cache = self.cache.write().unwrap();
        if let Err(e) = cache.fetch_and_ingest(self.capsules.as_ref(), &self.inode_capsule, &digest, &self.inode_key) {
            warn!("could not fetch committed inode {}: {e}; using local copy", digest.short());
            cache.ingest(digest, timestamp, body);
        }
        if cache.version(&digest).is_none() {
            warn!("committed inode version {} failed verification", digest.short());
        }
    }

    /// Returns false if the inode's remaining entries must not be flushed.
    fn commit_inode_entry(
        &self,
        journal: &Journal,
        seq: u64,
        mut body: InodeBlock,
        change_bits: u8,
        all: &[u64],
        report: &mut FlushReport,
    ) -> Result<bool, Stop> {
        let n = body.inode_number;
        for (idx, h) in body.data_hashes.iter_mut().enumerate() {
            if let Some(f) = journal.resolve(n, idx as u64, h, seq) {
                *h = f;
            }
        }
        let upto: Vec<u64> = all.iter().copied().filter(|s| *s <= seq).collect();
        for attempt in 0..=self.config.flush_retries {
            let winner = self.cache.read().unwrap().view.get(n).cloned();
            let current = winner.as_ref().map(|w| w.digest());
            if body.version_of != current {
                let Some(w) = &winner else {
                    body.version_of = None;
                    continue;
                };
                match rebase(&body, change_bits, &w.block, w.digest()) {
                    Some(b) => body = b,
                    None => {
                        self.fail(report, n, "inode was deleted by another writer".into());
                        journal.purge(&upto).map_err(|e| Stop::Transport(e.to_string()))?;
                        return Ok(true);
                    }
                }
                report.rebases += 1;
            }
            let block = self.sign(BlockBody::Inode(body.clone()), body.updated_by);
            let req = PutRequest::new(self.inode_capsule, &block, n, body.version_of);
            report.puts += 1;
            match self.put(&req)? {
                Ok(r) => {
                    journal
                        .mark_committed(seq, r.digest)
                        .map_err(|e| Stop::Transport(e.to_string()))?;
                    self.ingest_committed(r.digest, r.timestamp, body);
                    journal.purge(&upto).map_err(|e| Stop::Transport(e.to_string()))?;
                    report.inodes_committed += 1;
                    return Ok(true);
                }
                Err(PutError::Rejected(r)) if r.kind == RejectionKind::StaleInode => {
                    if attempt < self.config.flush_retries {
                        self.sync().map_err(|e| Stop::Transport(e.to_string()))?;
                    }
                }
                Err(e) => {
                    self.fail(report, n, format!("inode version rejected: {e}"));
                    journal.purge(&upto).map_err(|e| Stop::Transport(e.to_string()))?;
                    return Ok(true);
                }
            }
        }
        self.fail(report, n, "deferred-write-conflict: retry bound reached".into());
        Ok(false)
    }

    /// Background thread calling [`Client::flush`] every `interval`, with
    /// exponential backoff while the middleware is unreachable.
    pub fn spawn_flusher(self: &Arc<Self>, interval: Duration) -> Worker {
        let client = Arc::clone(self);
        Worker::spawn(move |stop| {
            let mut delay = interval;
            while !stop.load(Ordering::Relaxed) {
                match client.flush() {
                    Ok(_) => delay = interval,
                    Err(FsError::Crashed) => return,
                    Err(e) => {
                        warn!("flush failed: {e}; retrying in {delay:?}");
                        delay = (delay * 2).min(Duration::from_secs(5));
                    }
                }
                sleep_unless(&stop, delay);
            }
        })
    }

    /// Background thread following the inode capsule.
    pub fn spawn_updater(self: &Arc<Self>, interval: Duration) -> Worker {
        let client = Arc::clone(self);
        Worker::spawn(move |stop| {
            while !stop.load(Ordering::Relaxed) {
                if let Err(e) = client.sync() {
                    warn!("inode sync failed: {e}");
                }
                sleep_unless(&stop, interval);
            }
        })
    }
}

fn sleep_unless(stop: &AtomicBool, total: Duration) {
    let step = Duration::from_millis(10);
    let mut slept = Duration::ZERO;
    while slept < total && !stop.load(Ordering::Relaxed) {
        std::thread::sleep(step);
        slept += step;
    }
}

/// Local uid for `author` as seen by the holder of `self_key`.
pub fn map_author(author: &Identity, self_key: &crate::crypto::PublicKey, nobody: Uid) -> Uid {
    if author.key == *self_key {
        author.uid
    } else {
        nobody
    }
}

/// A stoppable background thread; stops and joins on drop.
pub struct Worker {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Worker {
    fn spawn(f: impl FnOnce(Arc<AtomicBool>) + Send + 'static) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let s = Arc::clone(&stop);
        Self {
            stop,
            handle: Some(std::thread::spawn(move || f(s))),
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests;

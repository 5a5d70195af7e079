// SPDX-License-Identifier: Apache-2.0

//! DataCapsule storage server.
//!
//! A [`CapsuleStore`] is one append-only capsule: sealed blocks in append
//! order, the set of chain heads, and a Merkle tree whose root is signed by
//! the capsule writer on every append. The server never holds the write key;
//! the writer proposes the signed root with each block and the server checks
//! it against its own tree.

mod log;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use crate::block::SealedBlock;
use crate::codec::{tag, Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{hash, Digest, PublicKey};
use crate::merkle::{MerkleProof, MerkleTree, SignedRoot};
use crate::service::{AppendReceipt, CapsuleError, CapsuleService, Subscription};

use self::log::{BlockLog, LogEntry};

/// Immutable description of a capsule; its hash is the capsule id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapsuleMetadata {
    pub name: String,
    pub block_size: u32,
    /// Verifies outer seals and signed roots.
    pub writer_key: PublicKey,
    pub nonce: u64,
}

impl CapsuleMetadata {
    pub fn capsule_id(&self) -> Digest {
        hash(&self.encode())
    }
}

impl Canonical for CapsuleMetadata {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(tag::CAPSULE_METADATA)
            .str(&self.name)
            .u32(self.block_size)
            .value(&self.writer_key)
            .u64(self.nonce);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.expect_tag(tag::CAPSULE_METADATA, "CapsuleMetadata")?;
        Ok(Self {
            name: dec.string()?,
            block_size: dec.u32()?,
            writer_key: dec.value()?,
            nonce: dec.u64()?,
        })
    }
}

/// Redundant server-side check run on every admitted block. Test builds
/// use it to count invalid blocks that slipped past the middleware.
pub trait AdmissionAudit: Send + Sync {
    fn admitted(&self, capsule: &Digest, block: &SealedBlock);
}

/// Rewrites bytes on their way out of `get`: the dishonest-server model.
pub type ReadTamper = Arc<dyn Fn(&Digest, &mut Vec<u8>) + Send + Sync>;

enum Backing {
    Memory(Vec<(Arc<Vec<u8>>, SignedRoot)>),
    File {
        log: BlockLog,
        entries: Vec<LogEntry>,
    },
}

struct StoreState {
    order: Vec<Digest>,
    index: HashMap<Digest, u64>,
    referenced: HashSet<Digest>,
    leaves: HashSet<Digest>,
    tree: MerkleTree,
    current_root: Option<SignedRoot>,
    backing: Backing,
}

impl StoreState {
    fn record(&self, seq: u64) -> Result<(Vec<u8>, SignedRoot), CapsuleError> {
        match &self.backing {
            Backing::Memory(v) => {
                let (b, r) = &v[seq as usize];
                Ok((b.as_ref().clone(), r.clone()))
            }
            Backing::File { log, entries } => Ok(log.read(&entries[seq as usize])?),
        }
    }

    fn publish(&mut self, digest: Digest, prev_hash: Digest, root: SignedRoot) {
        let seq = self.order.len() as u64;
        self.order.push(digest);
        self.index.insert(digest, seq);
        if prev_hash != Digest::GENESIS {
            self.referenced.insert(prev_hash);
            self.leaves.remove(&prev_hash);
        }
        if !self.referenced.contains(&digest) {
            self.leaves.insert(digest);
        }
        self.tree.push(&digest);
        self.current_root = Some(root);
    }

    fn proof_current(&self, seq: u64) -> MerkleProof {
        MerkleProof {
            leaf_digest: self.order[seq as usize],
            leaf_index: seq,
            path: self.tree.path(seq).expect("sequence in range"),
            root: self.current_root.clone().expect("non-empty store has a root"),
        }
    }
}

#[derive(Default, Debug)]
pub struct StoreStats {
    pub gets: AtomicU64,
    pub appends: AtomicU64,
    pub rejected: AtomicU64,
}

/// One capsule's append-only block store.
pub struct CapsuleStore {
    meta: CapsuleMetadata,
    id: Digest,
    state: RwLock<StoreState>,
    /// Serializes writers; readers only take `state` briefly.
    append_lock: Mutex<()>,
    signal: (Mutex<u64>, Condvar),
    follower: bool,
    audit: RwLock<Option<Arc<dyn AdmissionAudit>>>,
    read_tamper: RwLock<Option<ReadTamper>>,
    pub stats: StoreStats,
}

impl CapsuleStore {
    pub fn in_memory(meta: CapsuleMetadata) -> Self {
        Self::with_state(
            meta,
            StoreState {
                order: Vec::new(),
                index: HashMap::new(),
                referenced: HashSet::new(),
                leaves: HashSet::new(),
                tree: MerkleTree::new(),
                current_root: None,
                backing: Backing::Memory(Vec::new()),
            },
        )
    }

    /// Open a file-backed store, replaying the log.
    pub fn open(meta: CapsuleMetadata, path: &Path, sync: bool) -> Result<Self, CapsuleError> {
        let (log, entries) = BlockLog::open(path, sync)?;
        let mut state = StoreState {
            order: Vec::new(),
            index: HashMap::new(),
            referenced: HashSet::new(),
            leaves: HashSet::new(),
            tree: MerkleTree::new(),
            current_root: None,
            backing: Backing::Memory(Vec::new()),
        };
        for e in &entries {
            state.publish(e.digest, e.prev_hash, placeholder_root());
        }
        state.backing = Backing::File {
            log,
            entries: entries.clone(),
        };
        if let Some(last) = entries.len().checked_sub(1) {
            let (_, root) = state.record(last as u64)?;
            if Some(root.root) != state.tree.root() {
                return Err(CapsuleError::Io(format!(
                    "{}: stored root disagrees with replayed tree",
                    path.display()
                )));
            }
            state.current_root = Some(root);
        }
        Ok(Self::with_state(meta, state))
    }

    fn with_state(meta: CapsuleMetadata, state: StoreState) -> Self {
        let len = state.order.len() as u64;
        Self {
            id: meta.capsule_id(),
            meta,
            state: RwLock::new(state),
            append_lock: Mutex::new(()),
            signal: (Mutex::new(len), Condvar::new()),
            follower: false,
            audit: RwLock::new(None),
            read_tamper: RwLock::new(None),
            stats: StoreStats::default(),
        }
    }

    /// Followers accept only replicated blocks.
    pub fn into_follower(mut self) -> Self {
        self.follower = true;
        self
    }

    pub fn is_follower(&self) -> bool {
        self.follower
    }

    pub fn id(&self) -> Digest {
        self.id
    }

    pub fn metadata(&self) -> &CapsuleMetadata {
        &self.meta
    }

    pub fn set_audit(&self, audit: Option<Arc<dyn AdmissionAudit>>) {
        *self.audit.write().unwrap() = audit;
    }

    pub fn set_read_tamper(&self, tamper: Option<ReadTamper>) {
        *self.read_tamper.write().unwrap() = tamper;
    }

    /// Overwrite a stored block in place (memory-backed stores only). Fault
    /// injection for the dishonest-server model; honest code never calls it.
    pub fn replace_stored_bytes(&self, digest: &Digest, bytes: Vec<u8>) -> Result<(), CapsuleError> {
        let mut st = self.state.write().unwrap();
        let seq = *st.index.get(digest).ok_or(CapsuleError::NotFound)?;
        match &mut st.backing {
            Backing::Memory(v) => {
                v[seq as usize].0 = Arc::new(bytes);
                Ok(())
            }
            Backing::File { .. } => Err(CapsuleError::Io(
                "in-place replacement is only supported for memory stores".into(),
            )),
        }
    }

    pub fn len(&self) -> u64 {
        self.state.read().unwrap().order.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn order(&self) -> Vec<Digest> {
        self.state.read().unwrap().order.clone()
    }

    pub fn append(&self, sealed: &[u8], root: &SignedRoot) -> Result<AppendReceipt, CapsuleError> {
        if self.follower {
            return Err(CapsuleError::ReadOnly);
        }
        self.admit(sealed, root)
    }

    /// Append path for follower replication: same checks, no read-only gate.
    pub fn replicate(&self, sealed: &[u8], root: &SignedRoot) -> Result<AppendReceipt, CapsuleError> {
        self.admit(sealed, root)
    }

    fn admit(&self, sealed_bytes: &[u8], root: &SignedRoot) -> Result<AppendReceipt, CapsuleError> {
        let _writer = self.append_lock.lock().unwrap();
        let res = self.admit_locked(sealed_bytes, root);
        if res.is_err() {
            self.stats.rejected.fetch_add(1, Ordering::Relaxed);
        }
        res
    }

    fn admit_locked(
        &self,
        sealed_bytes: &[u8],
        root: &SignedRoot,
    ) -> Result<AppendReceipt, CapsuleError> {
        let sealed = SealedBlock::decode(sealed_bytes)
            .map_err(|e| CapsuleError::RejectedWrite(format!("undecodable block: {e}")))?;
        if sealed.capsule_id != self.id {
            return Err(CapsuleError::RejectedWrite("block names another capsule".into()));
        }
        {
            let st = self.state.read().unwrap();
            if let Some(&seq) = st.index.get(&sealed.digest) {
                return Ok(AppendReceipt {
                    digest: sealed.digest,
                    sequence: seq,
                    proof: st.proof_current(seq),
                });
            }
        }
        if !sealed.verify_seal(&self.meta.writer_key) {
            return Err(CapsuleError::RejectedWrite("outer signature invalid".into()));
        }
        let expected_root = {
            let st = self.state.read().unwrap();
            if sealed.prev_hash != Digest::GENESIS && !st.index.contains_key(&sealed.prev_hash) {
                return Err(CapsuleError::DanglingChain(sealed.prev_hash));
            }
            if root.tree_size != st.tree.len() + 1 {
                return Err(CapsuleError::RootMismatch);
            }
            st.tree.root_with(&sealed.digest)
        };
        if root.capsule_id != self.id
            || root.root != expected_root
            || !root.verify(&self.meta.writer_key)
        {
            return Err(CapsuleError::RootMismatch);
        }

        // Durable before publication.
        let mut st = self.state.write().unwrap();
        match &mut st.backing {
            Backing::Memory(v) => v.push((Arc::new(sealed_bytes.to_vec()), root.clone())),
            Backing::File { log, entries } => {
                let entry = log.append(sealed_bytes, root, sealed.digest, sealed.prev_hash)?;
                entries.push(entry);
            }
        }
        st.publish(sealed.digest, sealed.prev_hash, root.clone());
        let seq = st.order.len() as u64 - 1;
        let receipt = AppendReceipt {
            digest: sealed.digest,
            sequence: seq,
            proof: st.proof_current(seq),
        };
        drop(st);

        self.stats.appends.fetch_add(1, Ordering::Relaxed);
        if let Some(audit) = self.audit.read().unwrap().as_ref() {
            audit.admitted(&self.id, &sealed);
        }
        let (lock, cv) = &self.signal;
        *lock.lock().unwrap() = seq + 1;
        cv.notify_all();
        Ok(receipt)
    }

    pub fn get(&self, digest: &Digest) -> Result<(Vec<u8>, MerkleProof), CapsuleError> {
        self.stats.gets.fetch_add(1, Ordering::Relaxed);
        let (mut bytes, proof) = {
            let st = self.state.read().unwrap();
            let seq = *st.index.get(digest).ok_or(CapsuleError::NotFound)?;
            (st.record(seq)?.0, st.proof_current(seq))
        };
        if let Some(t) = self.read_tamper.read().unwrap().as_ref() {
            t(digest, &mut bytes);
        }
        Ok((bytes, proof))
    }

    /// Raw stored bytes and the signed root recorded with the block at
    /// `seq`; used by replication.
    pub fn record(&self, seq: u64) -> Result<(Vec<u8>, SignedRoot), CapsuleError> {
        let st = self.state.read().unwrap();
        if seq >= st.order.len() as u64 {
            return Err(CapsuleError::NotFound);
        }
        st.record(seq)
    }

    pub fn leaves(&self) -> Vec<Digest> {
        let st = self.state.read().unwrap();
        let mut v: Vec<Digest> = st.leaves.iter().copied().collect();
        v.sort_by_key(|d| st.index[d]);
        v
    }

    pub fn proof(&self, digest: &Digest, tree_size: Option<u64>) -> Result<MerkleProof, CapsuleError> {
        let st = self.state.read().unwrap();
        let seq = *st.index.get(digest).ok_or(CapsuleError::NotFound)?;
        let len = st.order.len() as u64;
        match tree_size {
            None => Ok(st.proof_current(seq)),
            Some(n) if n == len => Ok(st.proof_current(seq)),
            Some(n) if n > seq && n < len => {
                let tree = MerkleTree::from_digests(&st.order[..n as usize]);
                let (_, root) = st.record(n - 1)?;
                Ok(MerkleProof {
                    leaf_digest: *digest,
                    leaf_index: seq,
                    path: tree.path(seq).expect("in range"),
                    root,
                })
            }
            Some(_) => Err(CapsuleError::NotFound),
        }
    }

    pub fn subscribe(self: &Arc<Self>, from: u64) -> Result<LocalSubscription, CapsuleError> {
        let len = self.len();
        if from > len {
            return Err(CapsuleError::InvalidCursor { from, len });
        }
        Ok(LocalSubscription {
            store: Arc::clone(self),
            cursor: from,
        })
    }

    fn wait_for(&self, seq: u64, timeout: Duration) -> bool {
        let (lock, cv) = &self.signal;
        let deadline = Instant::now() + timeout;
        let mut len = lock.lock().unwrap();
        while *len <= seq {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            len = cv.wait_timeout(len, deadline - now).unwrap().0;
        }
        true
    }
}

fn placeholder_root() -> SignedRoot {
    SignedRoot {
        capsule_id: Digest::GENESIS,
        tree_size: 0,
        root: Digest::GENESIS,
        signature: crate::crypto::Signature {
            signer_key_id: Digest::GENESIS,
            bytes: Vec::new(),
        },
    }
}

/// Pull-based cursor over a store's append order. Reads never block appends.
pub struct LocalSubscription {
    store: Arc<CapsuleStore>,
    cursor: u64,
}

impl Subscription for LocalSubscription {
    fn next_timeout(&mut self, timeout: Duration) -> Result<Option<(u64, Digest)>, CapsuleError> {
        if !self.store.wait_for(self.cursor, timeout) {
            return Ok(None);
        }
        let st = self.store.state.read().unwrap();
        match st.order.get(self.cursor as usize) {
            Some(d) => {
                let out = (self.cursor, *d);
                self.cursor += 1;
                Ok(Some(out))
            }
            None => Ok(None),
        }
    }

    fn cursor(&self) -> u64 {
        self.cursor
    }
}

/// A server process hosting any number of capsules.
#[derive(Default)]
pub struct CapsuleServer {
    stores: RwLock<HashMap<Digest, Arc<CapsuleStore>>>,
}

impl CapsuleServer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn host(&self, store: CapsuleStore) -> Arc<CapsuleStore> {
        let store = Arc::new(store);
        self.stores
            .write()
            .unwrap()
            .insert(store.id(), Arc::clone(&store));
        store
    }

    pub fn store(&self, capsule: &Digest) -> Result<Arc<CapsuleStore>, CapsuleError> {
        self.stores
            .read()
            .unwrap()
            .get(capsule)
            .cloned()
            .ok_or(CapsuleError::UnknownCapsule(*capsule))
    }

    pub fn capsules(&self) -> Vec<Digest> {
        self.stores.read().unwrap().keys().copied().collect()
    }
}

impl CapsuleService for CapsuleServer {
    fn append(
        &self,
        capsule: &Digest,
        sealed: &[u8],
        root: &SignedRoot,
    ) -> Result<AppendReceipt, CapsuleError> {
        self.store(capsule)?.append(sealed, root)
    }

    fn get(&self, capsule: &Digest, digest: &Digest) -> Result<(Vec<u8>, MerkleProof), CapsuleError> {
        self.store(capsule)?.get(digest)
    }

    fn leaves(&self, capsule: &Digest) -> Result<Vec<Digest>, CapsuleError> {
        Ok(self.store(capsule)?.leaves())
    }

    fn proof(
        &self,
        capsule: &Digest,
        digest: &Digest,
        tree_size: Option<u64>,
    ) -> Result<MerkleProof, CapsuleError> {
        self.store(capsule)?.proof(digest, tree_size)
    }

    fn len(&self, capsule: &Digest) -> Result<u64, CapsuleError> {
        Ok(self.store(capsule)?.len())
    }

    fn subscribe(&self, capsule: &Digest, from: u64) -> Result<Box<dyn Subscription>, CapsuleError> {
        Ok(Box::new(self.store(capsule)?.subscribe(from)?))
    }
}

/// Copy every block from `leader` into the follower `store`, verbatim,
/// until `stop` returns true. Resumes from the follower's current length.
pub fn run_follower(
    store: &CapsuleStore,
    leader: &dyn CapsuleService,
    stop: &dyn Fn() -> bool,
) -> Result<(), CapsuleError> {
    let cap = store.id();
    let mut sub = leader.subscribe(&cap, store.len())?;
    while !stop() {
        let Some((seq, digest)) = sub.next_timeout(Duration::from_millis(100))? else {
            continue;
        };
        let (bytes, _) = leader.get(&cap, &digest)?;
        let proof = leader.proof(&cap, &digest, Some(seq + 1))?;
        store.replicate(&bytes, &proof.root)?;
    }
    Ok(())
}

/// Default store file for a capsule inside a data directory.
pub fn store_path(dir: &Path, meta: &CapsuleMetadata) -> PathBuf {
    dir.join(format!("{}.capsule", meta.name))
}

#[cfg(test)]
mod tests;

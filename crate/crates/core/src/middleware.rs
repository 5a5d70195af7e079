// SPDX-License-Identifier: Apache-2.0

//! The trusted write path.
//!
//! Every block reaches a capsule through here. A PUT is checked for a valid
//! client signature, a non-revoked author, ACL membership on the governing
//! inode and, for inode blocks, a compare-and-set on the current version.
//! Accepted blocks are timestamped, chained, signed, encrypted and appended.
//!
//! The middleware holds the only copy of the capsule write keys.

use std::collections::{HashMap, HashSet};
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{info, warn};

use crate::block::{
    acl_permits, build_cfs_block, verify_cfs_block, Acl, BlockBody, CfsBlock, Identity,
    InodeBlock, InodeKind, InodeNumber, NO_PARENT, ROOT_INODE,
};
use crate::codec::{tag, Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{self, CapsuleReadKey, CapsuleWriteKey, Digest, KeyPair, PublicKey, Signature};
use crate::fetch::fetch_verified;
use crate::service::{
    CapsuleError, CapsuleService, PutError, PutReceipt, Rejection, RejectionKind, WriteService,
};
use crate::view::InodeView;
use crate::writer::CapsuleWriter;

/// uid of the middleware's administrative identity.
pub const ADMIN_UID: u32 = 0;

/// A client's request to commit one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PutRequest {
    pub capsule_id: Digest,
    /// Canonical `CfsBlock` bytes, exactly as signed.
    pub block: Vec<u8>,
    pub claimed_inode: InodeNumber,
    pub expected_version: Option<Digest>,
}

impl PutRequest {
    pub fn new(
        capsule_id: Digest,
        block: &CfsBlock,
        claimed_inode: InodeNumber,
        expected_version: Option<Digest>,
    ) -> Self {
        Self {
            capsule_id,
            block: block.encode(),
            claimed_inode,
            expected_version,
        }
    }
}

impl Canonical for PutRequest {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(tag::PUT_REQUEST)
            .value(&self.capsule_id)
            .bytes(&self.block)
            .u64(self.claimed_inode)
            .option(self.expected_version.as_ref(), |e, d| {
                e.value(d);
            });
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.expect_tag(tag::PUT_REQUEST, "PutRequest")?;
        Ok(Self {
            capsule_id: dec.value()?,
            block: dec.bytes()?.to_vec(),
            claimed_inode: dec.u64()?,
            expected_version: dec.option(|d| d.value())?,
        })
    }
}

/// Signed request to blocklist a client key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RevokeRequest {
    pub key_id: Digest,
    /// Also strip the key from every current ACL.
    pub scrub: bool,
    pub requester: PublicKey,
    pub signature: Signature,
}

impl RevokeRequest {
    fn payload(key_id: &Digest, scrub: bool) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u8(tag::REVOKE_PAYLOAD).value(key_id).bool(scrub);
        enc.finish()
    }

    pub fn sign(key_id: Digest, scrub: bool, requester: &KeyPair) -> Self {
        Self {
            key_id,
            scrub,
            requester: *requester.public(),
            signature: requester.sign(&Self::payload(&key_id, scrub)),
        }
    }

    pub fn verify(&self) -> bool {
        crypto::verify(
            &self.requester,
            &Self::payload(&self.key_id, self.scrub),
            &self.signature,
        )
    }
}

impl Canonical for RevokeRequest {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(tag::REVOKE_REQUEST)
            .value(&self.key_id)
            .bool(self.scrub)
            .value(&self.requester)
            .value(&self.signature);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.expect_tag(tag::REVOKE_REQUEST, "RevokeRequest")?;
        Ok(Self {
            key_id: dec.value()?,
            scrub: dec.bool()?,
            requester: dec.value()?,
            signature: dec.value()?,
        })
    }
}

/// Which admission checks run. Everything is on by default; the switches
/// exist so the attack harness can prove its own sensitivity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MiddlewarePolicy {
    pub verify_signatures: bool,
    pub enforce_revocation: bool,
    pub enforce_acl: bool,
    pub enforce_freshness: bool,
    /// Revocation emits ACL-scrub versions when the request asks for it.
    pub scrub_on_revoke: bool,
}

impl Default for MiddlewarePolicy {
    fn default() -> Self {
        Self {
            verify_signatures: true,
            enforce_revocation: true,
            enforce_acl: true,
            enforce_freshness: true,
            scrub_on_revoke: true,
        }
    }
}

pub struct MiddlewareSetup {
    pub server: Arc<dyn CapsuleService>,
    pub inode_capsule: Digest,
    pub inode_key: CapsuleWriteKey,
    pub data_capsule: Digest,
    pub data_key: CapsuleWriteKey,
    pub block_size: usize,
    pub admin: KeyPair,
    pub policy: MiddlewarePolicy,
    /// Revoked key ids, one hex digest per line; loaded and appended to.
    pub revocation_list: Option<PathBuf>,
}

#[derive(Default, Debug, Clone, PartialEq, Eq)]
pub struct MiddlewareStats {
    pub accepted: u64,
    pub rejected: HashMap<RejectionKind, u64>,
    /// Inode-capsule blocks skipped during view sync.
    pub view_ignored: u64,
}

struct ViewState {
    view: InodeView,
    seen: HashSet<Digest>,
    cursor: u64,
    ignored: u64,
}

pub struct Middleware {
    server: Arc<dyn CapsuleService>,
    inode_capsule: Digest,
    data_capsule: Digest,
    inode_writer: Mutex<CapsuleWriter>,
    data_writer: Mutex<CapsuleWriter>,
    inode_read: CapsuleReadKey,
    block_size: usize,
    admin_key: KeyPair,
    state: RwLock<ViewState>,
    revoked: RwLock<HashSet<Digest>>,
    revocation_list: Option<PathBuf>,
    clock: Mutex<u64>,
    policy: RwLock<MiddlewarePolicy>,
    stats: Mutex<MiddlewareStats>,
}

fn reject(kind: RejectionKind, detail: impl Into<String>) -> PutError {
    PutError::Rejected(Rejection::new(kind, detail))
}

fn server_error(e: CapsuleError) -> PutError {
    if e.is_transport() {
        PutError::Transport(e.to_string())
    } else {
        reject(RejectionKind::Server, e.to_string())
    }
}

fn wall_clock_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_micros() as u64)
}

impl Middleware {
    /// Bring up a middleware against a (possibly non-empty) pair of capsules.
    pub fn start(setup: MiddlewareSetup) -> Result<Self, CapsuleError> {
        let MiddlewareSetup {
            server,
            inode_capsule,
            inode_key,
            data_capsule,
            data_key,
            block_size,
            admin,
            policy,
            revocation_list,
        } = setup;
        let mut inode_writer = CapsuleWriter::new(inode_key, inode_capsule);
        let mut data_writer = CapsuleWriter::new(data_key, data_capsule);
        inode_writer.sync_from(server.as_ref())?;
        data_writer.sync_from(server.as_ref())?;
        let revoked = match &revocation_list {
            Some(p) if p.exists() => std::fs::read_to_string(p)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| Digest::from_hex(l.trim()))
                .collect::<Result<HashSet<_>, _>>()
                .map_err(|e| CapsuleError::Io(format!("{}: {e}", p.display())))?,
            _ => HashSet::new(),
        };
        let mw = Self {
            inode_read: inode_writer.key().read_key(),
            server,
            inode_capsule,
            data_capsule,
            inode_writer: Mutex::new(inode_writer),
            data_writer: Mutex::new(data_writer),
            block_size,
            admin_key: admin,
            state: RwLock::new(ViewState {
                view: InodeView::new(),
                seen: HashSet::new(),
                cursor: 0,
                ignored: 0,
            }),
            revoked: RwLock::new(revoked),
            revocation_list,
            clock: Mutex::new(0),
            policy: RwLock::new(policy),
            stats: Mutex::new(MiddlewareStats::default()),
        };
        mw.sync_acl_view()?;
        Ok(mw)
    }

    pub fn admin_identity(&self) -> Identity {
        Identity::new(*self.admin_key.public(), ADMIN_UID)
    }

    pub fn inode_capsule(&self) -> Digest {
        self.inode_capsule
    }

    pub fn data_capsule(&self) -> Digest {
        self.data_capsule
    }

    pub fn policy(&self) -> MiddlewarePolicy {
        *self.policy.read().unwrap()
    }

    pub fn set_policy(&self, policy: MiddlewarePolicy) {
        *self.policy.write().unwrap() = policy;
    }

    pub fn stats(&self) -> MiddlewareStats {
        let mut s = self.stats.lock().unwrap().clone();
        s.view_ignored = self.state.read().unwrap().ignored;
        s
    }

    /// A copy of the current ACL view.
    pub fn view(&self) -> InodeView {
        self.state.read().unwrap().view.clone()
    }

    pub fn view_digests(&self) -> HashMap<InodeNumber, Digest> {
        self.state.read().unwrap().view.digests()
    }

    pub fn is_revoked(&self, key_id: &Digest) -> bool {
        self.revoked.read().unwrap().contains(key_id)
    }

    /// Strictly increasing microsecond timestamps.
    pub fn assign_timestamp(&self) -> u64 {
        let mut last = self.clock.lock().unwrap();
        let ts = wall_clock_us().max(*last + 1);
        *last = ts;
        ts
    }

    /// Create the root directory if the inode capsule has none. The admin
    /// identity is always added to the root ACL.
    pub fn init_root(&self, members: &[Identity]) -> Result<Digest, PutError> {
        let mut writer = self.inode_writer.lock().unwrap();
        if let Some(d) = self.state.read().unwrap().view.digest_of(ROOT_INODE) {
            return Ok(d);
        }
        let admin = self.admin_identity();
        let root = InodeBlock {
            inode_number: ROOT_INODE,
            parent_inode: NO_PARENT,
            name: String::new(),
            kind: InodeKind::Directory,
            deleted: false,
            size: 0,
            data_hashes: Vec::new(),
            acl: Acl::new(members.iter().copied().chain([admin])),
            updated_by: admin,
            version_of: None,
        };
        let block = build_cfs_block(BlockBody::Inode(root), admin, &self.admin_key)
            .expect("admin identity uses the admin key");
        Ok(self.commit_inode(&mut writer, block)?.digest)
    }

    /// Pull inode-capsule blocks this middleware has not seen yet (e.g.
    /// after a restart) into the ACL view.
    pub fn sync_acl_view(&self) -> Result<usize, CapsuleError> {
        let len = self.server.len(&self.inode_capsule)?;
        let cursor = self.state.read().unwrap().cursor;
        if cursor >= len {
            return Ok(0);
        }
        let mut sub = self.server.subscribe(&self.inode_capsule, cursor)?;
        let mut added = 0;
        while sub.cursor() < len {
            let Some((seq, digest)) = sub.next_timeout(Duration::from_secs(5))? else {
                return Err(CapsuleError::Transport("view subscription stalled".into()));
            };
            let known = self.state.read().unwrap().seen.contains(&digest);
            let fetched = if known {
                None
            } else {
                Some(fetch_verified(
                    self.server.as_ref(),
                    &self.inode_capsule,
                    &digest,
                    &self.inode_read,
                ))
            };
            let mut st = self.state.write().unwrap();
            st.cursor = seq + 1;
            match fetched {
                None => {}
                Some(Err(e)) if e.is_transport() => {
                    st.cursor = seq;
                    return Err(CapsuleError::Transport(e.to_string()));
                }
                Some(Err(e)) => {
                    warn!("ignoring inode block {}: {e}", digest.short());
                    st.seen.insert(digest);
                    st.ignored += 1;
                }
                Some(Ok(opened)) => {
                    st.seen.insert(digest);
                    match opened.outer.inner.body {
                        BlockBody::Inode(b) => {
                            st.view.offer(digest, opened.outer.timestamp, b);
                            added += 1;
                        }
                        BlockBody::Data(_) => {
                            warn!("data block {} in the inode capsule", digest.short());
                            st.ignored += 1;
                        }
                    }
                }
            }
        }
        Ok(added)
    }

    fn count(&self, res: &Result<PutReceipt, PutError>) {
        let mut s = self.stats.lock().unwrap();
        match res {
            Ok(_) => s.accepted += 1,
            Err(PutError::Rejected(r)) => *s.rejected.entry(r.kind).or_default() += 1,
            Err(PutError::Transport(_)) => {}
        }
    }

    pub fn handle_put(&self, request: &PutRequest) -> Result<PutReceipt, PutError> {
        let res = self.handle_put_inner(request);
        if let Err(PutError::Rejected(r)) = &res {
            info!("rejected put for inode {}: {r}", request.claimed_inode);
        }
        self.count(&res);
        res
    }

    fn handle_put_inner(&self, req: &PutRequest) -> Result<PutReceipt, PutError> {
        let policy = self.policy();
        let block = CfsBlock::decode(&req.block)
            .map_err(|e| reject(RejectionKind::Malformed, format!("undecodable block: {e}")))?;
        if policy.verify_signatures && !verify_cfs_block(&block) {
            return Err(reject(RejectionKind::BadSignature, "client signature mismatch"));
        }
        if policy.enforce_revocation && self.is_revoked(&block.author.key.key_id()) {
            return Err(reject(RejectionKind::Revoked, "author key has been revoked"));
        }
        if req.capsule_id != self.inode_capsule && req.capsule_id != self.data_capsule {
            return Err(reject(
                RejectionKind::UnknownCapsule,
                format!("capsule {} is not served here", req.capsule_id.short()),
            ));
        }
        match &block.body {
            BlockBody::Inode(body) => {
                if req.capsule_id != self.inode_capsule {
                    return Err(reject(RejectionKind::Malformed, "inode block sent to data capsule"));
                }
                body.validate(self.block_size)
                    .map_err(|e| reject(RejectionKind::Malformed, e.to_string()))?;
                if body.inode_number != req.claimed_inode {
                    return Err(reject(RejectionKind::Malformed, "claimed inode differs from body"));
                }
                if body.updated_by != block.author {
                    return Err(reject(RejectionKind::Malformed, "updated_by differs from author"));
                }
                if body.version_of != req.expected_version {
                    return Err(reject(
                        RejectionKind::Malformed,
                        "expected_version differs from version_of",
                    ));
                }
                let mut writer = self.inode_writer.lock().unwrap();
                self.admit_inode(&policy, body, &block.author, req.expected_version)?;
                self.commit_inode(&mut writer, block)
            }
            BlockBody::Data(data) => {
                if req.capsule_id != self.data_capsule {
                    return Err(reject(RejectionKind::Malformed, "data block sent to inode capsule"));
                }
                if data.payload.len() > self.block_size {
                    return Err(reject(RejectionKind::Malformed, "data block exceeds block size"));
                }
                {
                    let st = self.state.read().unwrap();
                    let owner = st.view.live(req.claimed_inode).ok_or_else(|| {
                        reject(RejectionKind::NotFound, "governing inode does not exist")
                    })?;
                    if owner.block.is_dir() {
                        return Err(reject(RejectionKind::Malformed, "directories carry no data"));
                    }
                    if policy.enforce_acl && !acl_permits(&owner.block.acl, &block.author) {
                        return Err(reject(RejectionKind::Forbidden, "author is not in the inode ACL"));
                    }
                }
                let mut writer = self.data_writer.lock().unwrap();
                self.append(&mut writer, block)
            }
        }
    }

    /// ACL and freshness rules for an inode version. Caller holds the
    /// inode writer lock, so the view cannot move underneath.
    fn admit_inode(
        &self,
        policy: &MiddlewarePolicy,
        body: &InodeBlock,
        author: &Identity,
        expected: Option<Digest>,
    ) -> Result<(), PutError> {
        let st = self.state.read().unwrap();
        let view = &st.view;
        let forbidden = |m: &str| Err(reject(RejectionKind::Forbidden, m));
        match view.get(body.inode_number) {
            Some(cur) => {
                if policy.enforce_acl && !acl_permits(&cur.block.acl, author) {
                    return forbidden("author is not in the inode ACL");
                }
                if cur.block.kind != body.kind {
                    return Err(reject(RejectionKind::Malformed, "inode kind cannot change"));
                }
                if body.inode_number == ROOT_INODE && body.deleted {
                    return Err(reject(RejectionKind::Malformed, "root cannot be deleted"));
                }
                if body.parent_inode != cur.block.parent_inode {
                    let parent = view.live(body.parent_inode).filter(|p| p.block.is_dir());
                    let Some(parent) = parent else {
                        return Err(reject(RejectionKind::NotFound, "new parent is not a directory"));
                    };
                    if policy.enforce_acl && !acl_permits(&parent.block.acl, author) {
                        return forbidden("author is not in the new parent's ACL");
                    }
                }
                if policy.enforce_freshness && expected != Some(cur.digest()) {
                    return Err(PutError::Rejected(Rejection {
                        kind: RejectionKind::StaleInode,
                        detail: "inode has a newer version".into(),
                        current: Some(cur.digest()),
                    }));
                }
            }
            None => {
                if body.inode_number == ROOT_INODE {
                    if policy.enforce_acl && *author != self.admin_identity() {
                        return forbidden("only the admin identity creates the root");
                    }
                    return Ok(());
                }
                if policy.enforce_freshness && expected.is_some() {
                    return Err(PutError::Rejected(Rejection {
                        kind: RejectionKind::StaleInode,
                        detail: "no such inode version".into(),
                        current: None,
                    }));
                }
                let parent = view.live(body.parent_inode).filter(|p| p.block.is_dir());
                let Some(parent) = parent else {
                    return Err(reject(RejectionKind::NotFound, "parent is not a directory"));
                };
                if policy.enforce_acl && !acl_permits(&parent.block.acl, author) {
                    return forbidden("author is not in the parent ACL");
                }
            }
        }
        Ok(())
    }

    fn commit_inode(&self, writer: &mut CapsuleWriter, block: CfsBlock) -> Result<PutReceipt, PutError> {
        let body = match &block.body {
            BlockBody::Inode(b) => b.clone(),
            BlockBody::Data(_) => unreachable!("commit_inode takes inode blocks"),
        };
        let receipt = self.append(writer, block)?;
        let mut st = self.state.write().unwrap();
        st.seen.insert(receipt.digest);
        st.view.offer(receipt.digest, receipt.timestamp, body);
        Ok(receipt)
    }

    fn append(&self, writer: &mut CapsuleWriter, block: CfsBlock) -> Result<PutReceipt, PutError> {
        let timestamp = self.assign_timestamp();
        let prepared = writer.prepare(block, timestamp, None);
        match self
            .server
            .append(&writer.capsule_id(), &prepared.sealed, &prepared.root)
        {
            Ok(r) => {
                writer.commit(&prepared);
                Ok(PutReceipt {
                    digest: r.digest,
                    timestamp,
                    sequence: r.sequence,
                })
            }
            Err(e) => {
                // The append may have landed before the connection dropped,
                // or another writer moved the tree; catch up either way.
                if let Err(se) = writer.sync_from(self.server.as_ref()) {
                    warn!("resync of {} failed: {se}", writer.capsule_id().short());
                }
                if writer.capsule_id() == self.inode_capsule {
                    if let Err(se) = self.sync_acl_view() {
                        warn!("view resync failed: {se}");
                    }
                }
                Err(server_error(e))
            }
        }
    }

    /// Blocklist `key_id`; with `scrub`, also emit ACL versions without it.
    /// Returns the number of scrub versions written.
    pub fn revoke_key(&self, key_id: Digest, scrub: bool) -> Result<u64, PutError> {
        let newly = self.revoked.write().unwrap().insert(key_id);
        if newly {
            if let Some(path) = &self.revocation_list {
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| reject(RejectionKind::Server, e.to_string()))?;
                writeln!(f, "{}", key_id.to_hex())
                    .and_then(|_| f.sync_data())
                    .map_err(|e| reject(RejectionKind::Server, e.to_string()))?;
            }
            info!("revoked key {}", key_id.short());
        }
        if !(scrub && self.policy().scrub_on_revoke) {
            return Ok(0);
        }
        let admin = self.admin_identity();
        let mut writer = self.inode_writer.lock().unwrap();
        let targets: Vec<(Digest, InodeBlock)> = {
            let st = self.state.read().unwrap();
            let mut v: Vec<_> = st
                .view
                .inodes()
                .filter(|e| !e.block.deleted && e.block.acl.mentions_key(&key_id))
                .map(|e| (e.digest(), e.block.clone()))
                .collect();
            v.sort_by_key(|(_, b)| b.inode_number);
            v
        };
        let mut written = 0;
        for (digest, mut body) in targets {
            let mut acl = body.acl.without_key(&key_id);
            if acl.is_empty() {
                acl = Acl::new([admin]);
            }
            body.acl = acl;
            body.updated_by = admin;
            body.version_of = Some(digest);
            let block = build_cfs_block(BlockBody::Inode(body), admin, &self.admin_key)
                .expect("admin identity uses the admin key");
            self.commit_inode(&mut writer, block)?;
            written += 1;
        }
        Ok(written)
    }

    /// Authenticated revocation: the requester must be the admin key or a
    /// member of the root ACL, and not revoked itself.
    pub fn handle_revoke(&self, req: &RevokeRequest) -> Result<u64, PutError> {
        if !req.verify() {
            return Err(reject(RejectionKind::BadSignature, "revocation signature mismatch"));
        }
        if self.is_revoked(&req.requester.key_id()) {
            return Err(reject(RejectionKind::Revoked, "requester key has been revoked"));
        }
        let authorized = req.requester == *self.admin_key.public()
            || self
                .state
                .read()
                .unwrap()
                .view
                .live(ROOT_INODE)
                .is_some_and(|r| r.block.acl.mentions_key(&req.requester.key_id()));
        if !authorized {
            return Err(reject(RejectionKind::Forbidden, "requester may not revoke keys"));
        }
        self.revoke_key(req.key_id, req.scrub)
    }
}

impl WriteService for Middleware {
    fn put(&self, request: &[u8]) -> Result<PutReceipt, PutError> {
        let req = PutRequest::decode(request).map_err(|e| {
            let err = reject(RejectionKind::Malformed, format!("undecodable request: {e}"));
            self.count(&Err(err.clone()));
            err
        })?;
        self.handle_put(&req)
    }

    fn revoke(&self, request: &[u8]) -> Result<u64, PutError> {
        let req = RevokeRequest::decode(request)
            .map_err(|e| reject(RejectionKind::Malformed, format!("undecodable request: {e}")))?;
        self.handle_revoke(&req)
    }
}

#[cfg(test)]
mod tests;

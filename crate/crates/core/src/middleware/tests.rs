// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use super::*;
use crate::block::{DataBlock, VersionKey, DEFAULT_BLOCK_SIZE};
use crate::crypto::Scheme;
use crate::server::{CapsuleMetadata, CapsuleServer, CapsuleStore};

struct Bed {
    server: Arc<CapsuleServer>,
    inode_key: CapsuleWriteKey,
    data_key: CapsuleWriteKey,
    inode_id: Digest,
    data_id: Digest,
    admin: KeyPair,
    alice_key: KeyPair,
    mw: Middleware,
}

impl Bed {
    fn new() -> Self {
        let server = Arc::new(CapsuleServer::new());
        let inode_key = CapsuleWriteKey::generate(Scheme::Ed25519);
        let data_key = CapsuleWriteKey::generate(Scheme::Ed25519);
        let meta = |name: &str, key: &CapsuleWriteKey| CapsuleMetadata {
            name: name.into(),
            block_size: DEFAULT_BLOCK_SIZE as u32,
            writer_key: *key.verifying_key(),
            nonce: 0,
        };
        let inode_id = server
            .host(CapsuleStore::in_memory(meta("inodes", &inode_key)))
            .id();
        let data_id = server
            .host(CapsuleStore::in_memory(meta("data", &data_key)))
            .id();
        let admin = KeyPair::generate(Scheme::Ed25519);
        let alice_key = KeyPair::generate(Scheme::Ed25519);
        let mw = Self::boot(&server, &inode_key, &data_key, inode_id, data_id, &admin);
        let alice = Identity::new(*alice_key.public(), 1000);
        mw.init_root(&[alice]).unwrap();
        Self {
            server,
            inode_key,
            data_key,
            inode_id,
            data_id,
            admin,
            alice_key,
            mw,
        }
    }

    fn boot(
        server: &Arc<CapsuleServer>,
        ik: &CapsuleWriteKey,
        dk: &CapsuleWriteKey,
        inode_id: Digest,
        data_id: Digest,
        admin: &KeyPair,
    ) -> Middleware {
        Middleware::start(MiddlewareSetup {
            server: server.clone(),
            inode_capsule: inode_id,
            inode_key: ik.clone(),
            data_capsule: data_id,
            data_key: dk.clone(),
            block_size: DEFAULT_BLOCK_SIZE,
            admin: admin.clone(),
            policy: MiddlewarePolicy::default(),
            revocation_list: None,
        })
        .unwrap()
    }

    fn restart(&self) -> Middleware {
        Self::boot(
            &self.server,
            &self.inode_key,
            &self.data_key,
            self.inode_id,
            self.data_id,
            &self.admin,
        )
    }

    fn alice(&self) -> Identity {
        Identity::new(*self.alice_key.public(), 1000)
    }

    fn root_acl(&self) -> Acl {
        self.mw.view().get(ROOT_INODE).unwrap().block.acl.clone()
    }

    fn file(&self, n: InodeNumber, name: &str, who: Identity, version_of: Option<Digest>) -> InodeBlock {
        InodeBlock {
            inode_number: n,
            parent_inode: ROOT_INODE,
            name: name.into(),
            kind: InodeKind::File,
            deleted: false,
            size: 0,
            data_hashes: vec![],
            acl: self.root_acl(),
            updated_by: who,
            version_of,
        }
    }

    fn put_inode(&self, key: &KeyPair, body: InodeBlock) -> Result<PutReceipt, PutError> {
        let (n, expected, who) = (body.inode_number, body.version_of, body.updated_by);
        let block = build_cfs_block(BlockBody::Inode(body), who, key).unwrap();
        self.mw
            .put(&PutRequest::new(self.inode_id, &block, n, expected).encode())
    }

    fn put_data(&self, key: &KeyPair, who: Identity, n: InodeNumber, payload: &[u8]) -> Result<PutReceipt, PutError> {
        let block = build_cfs_block(
            BlockBody::Data(DataBlock {
                payload: payload.to_vec(),
            }),
            who,
            key,
        )
        .unwrap();
        self.mw
            .put(&PutRequest::new(self.data_id, &block, n, None).encode())
    }
}

fn kind(e: PutError) -> RejectionKind {
    e.rejection().expect("a rejection").kind
}

#[test]
fn valid_write_is_readable_from_server() {
    let bed = Bed::new();
    let r = bed.put_inode(&bed.alice_key, bed.file(10, "f", bed.alice(), None)).unwrap();
    let d = bed.put_data(&bed.alice_key, bed.alice(), 10, b"hello").unwrap();
    let opened = fetch_verified(bed.server.as_ref(), &bed.data_id, &d.digest, &bed.data_key.read_key()).unwrap();
    assert_eq!(opened.outer.timestamp, d.timestamp);
    assert_eq!(opened.outer.inner.body.as_data().unwrap().payload, b"hello");
    assert_eq!(bed.mw.view_digests()[&10], r.digest);
    assert!(d.timestamp > r.timestamp);
}

#[test]
fn mutated_body_keeps_original_signature_and_fails() {
    let bed = Bed::new();
    let body = bed.file(10, "f", bed.alice(), None);
    let mut block = build_cfs_block(BlockBody::Inode(body), bed.alice(), &bed.alice_key).unwrap();
    if let BlockBody::Inode(b) = &mut block.body {
        b.name = "evil".into();
    }
    let err = bed
        .mw
        .put(&PutRequest::new(bed.inode_id, &block, 10, None).encode())
        .unwrap_err();
    assert_eq!(kind(err), RejectionKind::BadSignature);
    assert!(bed.mw.view().get(10).is_none());
}

#[test]
fn attacker_resigned_block_is_forbidden() {
    let bed = Bed::new();
    bed.put_inode(&bed.alice_key, bed.file(10, "f", bed.alice(), None)).unwrap();
    let mallory_key = KeyPair::generate(Scheme::Ed25519);
    let mallory = Identity::new(*mallory_key.public(), 1000);
    let err = bed.put_data(&mallory_key, mallory, 10, b"x").unwrap_err();
    assert_eq!(kind(err), RejectionKind::Forbidden);
    let err = bed.put_inode(&mallory_key, bed.file(11, "g", mallory, None)).unwrap_err();
    assert_eq!(kind(err), RejectionKind::Forbidden);
}

#[test]
fn revoked_key_is_rejected_and_scrubbed() {
    let bed = Bed::new();
    bed.put_inode(&bed.alice_key, bed.file(10, "f", bed.alice(), None)).unwrap();
    bed.put_inode(&bed.alice_key, bed.file(11, "g", bed.alice(), None)).unwrap();
    let written = bed.mw.revoke_key(bed.alice_key.key_id(), true).unwrap();
    assert_eq!(written, 3);
    let err = bed.put_data(&bed.alice_key, bed.alice(), 10, b"late").unwrap_err();
    assert_eq!(kind(err), RejectionKind::Revoked);
    for e in bed.mw.view().inodes() {
        assert!(!e.block.acl.mentions_key(&bed.alice_key.key_id()), "inode {}", e.block.inode_number);
    }
    // Revoking an unknown key is an idempotent no-op.
    let before = bed.mw.view_digests();
    assert_eq!(bed.mw.revoke_key(Digest([5; 32]), true).unwrap(), 0);
    assert_eq!(bed.mw.view_digests(), before);
}

#[test]
fn revocation_requires_authority() {
    let bed = Bed::new();
    let stranger = KeyPair::generate(Scheme::Ed25519);
    let req = RevokeRequest::sign(bed.alice_key.key_id(), false, &stranger);
    assert_eq!(kind(bed.mw.revoke(&req.encode()).unwrap_err()), RejectionKind::Forbidden);
    let mut forged = RevokeRequest::sign(bed.alice_key.key_id(), false, &bed.admin);
    forged.scrub = true;
    assert_eq!(kind(bed.mw.revoke(&forged.encode()).unwrap_err()), RejectionKind::BadSignature);
    let req = RevokeRequest::sign(stranger.key_id(), false, &bed.alice_key);
    assert_eq!(bed.mw.revoke(&req.encode()).unwrap(), 0);
    assert!(bed.mw.is_revoked(&stranger.key_id()));
}

#[test]
fn stale_version_is_rejected_with_current() {
    let bed = Bed::new();
    let v1 = bed.put_inode(&bed.alice_key, bed.file(10, "f", bed.alice(), None)).unwrap();
    let v2 = bed
        .put_inode(&bed.alice_key, bed.file(10, "f2", bed.alice(), Some(v1.digest)))
        .unwrap();
    let err = bed
        .put_inode(&bed.alice_key, bed.file(10, "f3", bed.alice(), Some(v1.digest)))
        .unwrap_err();
    let r = err.rejection().unwrap();
    assert_eq!(r.kind, RejectionKind::StaleInode);
    assert_eq!(r.current, Some(v2.digest));
    // Creating an existing inode number afresh is stale too.
    let err = bed.put_inode(&bed.alice_key, bed.file(10, "dup", bed.alice(), None)).unwrap_err();
    assert_eq!(kind(err), RejectionKind::StaleInode);
}

#[test]
fn acl_change_rules() {
    let bed = Bed::new();
    let bob_key = KeyPair::generate(Scheme::Ed25519);
    let bob = Identity::new(*bob_key.public(), 2000);
    let v1 = bed.put_inode(&bed.alice_key, bed.file(10, "f", bed.alice(), None)).unwrap();

    // Non-member cannot rewrite the ACL to include itself.
    let mut grab = bed.file(10, "f", bob, Some(v1.digest));
    grab.acl = grab.acl.with(bob);
    assert_eq!(kind(bed.put_inode(&bob_key, grab).unwrap_err()), RejectionKind::Forbidden);

    // Member adds bob; both may now write.
    let mut add = bed.file(10, "f", bed.alice(), Some(v1.digest));
    add.acl = add.acl.with(bob);
    let v2 = bed.put_inode(&bed.alice_key, add).unwrap();
    bed.put_data(&bob_key, bob, 10, b"bob").unwrap();
    bed.put_data(&bed.alice_key, bed.alice(), 10, b"alice").unwrap();

    // Self-lockout is allowed and then enforced.
    let mut drop_self = bed.file(10, "f", bed.alice(), Some(v2.digest));
    drop_self.acl = Acl::new([bob]);
    bed.put_inode(&bed.alice_key, drop_self).unwrap();
    assert_eq!(
        kind(bed.put_data(&bed.alice_key, bed.alice(), 10, b"x").unwrap_err()),
        RejectionKind::Forbidden
    );
}

#[test]
fn structural_rejections() {
    let bed = Bed::new();
    assert_eq!(
        kind(bed.put_data(&bed.alice_key, bed.alice(), 99, b"x").unwrap_err()),
        RejectionKind::NotFound
    );
    let mut orphan = bed.file(12, "o", bed.alice(), None);
    orphan.parent_inode = 77;
    assert_eq!(kind(bed.put_inode(&bed.alice_key, orphan).unwrap_err()), RejectionKind::NotFound);
    let mut lying = bed.file(12, "o", bed.alice(), None);
    lying.size = 10;
    assert_eq!(kind(bed.put_inode(&bed.alice_key, lying).unwrap_err()), RejectionKind::Malformed);
    assert_eq!(kind(bed.mw.put(b"garbage").unwrap_err()), RejectionKind::Malformed);
    let stats = bed.mw.stats();
    assert_eq!(stats.rejected[&RejectionKind::Malformed], 2);
    assert_eq!(stats.rejected[&RejectionKind::NotFound], 2);
}

#[test]
fn timestamps_strictly_increase() {
    let bed = Bed::new();
    let mut last = 0;
    for _ in 0..10_000 {
        let t = bed.mw.assign_timestamp();
        assert!(t > last);
        last = t;
    }
}

#[test]
fn restarted_middleware_rebuilds_the_same_view() {
    let bed = Bed::new();
    let v1 = bed.put_inode(&bed.alice_key, bed.file(10, "f", bed.alice(), None)).unwrap();
    bed.put_inode(&bed.alice_key, bed.file(10, "f2", bed.alice(), Some(v1.digest)))
        .unwrap();
    bed.put_inode(&bed.alice_key, bed.file(11, "g", bed.alice(), None)).unwrap();
    let fresh = bed.restart();
    assert_eq!(fresh.view_digests(), bed.mw.view_digests());
    // The restarted writer continues the chain.
    let r = bed.put_data(&bed.alice_key, bed.alice(), 11, b"x");
    assert!(r.is_ok());
}

#[test]
fn view_sync_skips_blocks_with_bad_client_signatures() {
    let bed = Bed::new();
    // A block sealed with the real write key but carrying a broken client
    // signature: only a compromised middleware could produce it.
    let mut writer = CapsuleWriter::new(bed.inode_key.clone(), bed.inode_id);
    writer.sync_from(bed.server.as_ref()).unwrap();
    let mut block = build_cfs_block(
        BlockBody::Inode(bed.file(30, "bad", bed.alice(), None)),
        bed.alice(),
        &bed.alice_key,
    )
    .unwrap();
    block.client_signature.bytes[0] ^= 1;
    writer.append(bed.server.as_ref(), block, 1).unwrap();
    let fresh = bed.restart();
    assert!(fresh.view().get(30).is_none());
    assert_eq!(fresh.stats().view_ignored, 1);
}

/// Racing writers on one inode: the view winner is the maximum version key
/// found by replaying the whole capsule.
#[test]
fn concurrent_versions_resolve_to_max_timestamp() {
    let bed = Arc::new(Bed::new());
    bed.put_inode(&bed.alice_key, bed.file(10, "f", bed.alice(), None)).unwrap();
    let handles: Vec<_> = (0..4)
        .map(|t| {
            let bed = Arc::clone(&bed);
            std::thread::spawn(move || {
                for i in 0..10 {
                    loop {
                        let cur = bed.mw.view_digests()[&10];
                        let body = bed.file(10, &format!("t{t}-{i}"), bed.alice(), Some(cur));
                        match bed.put_inode(&bed.alice_key, body) {
                            Ok(_) => break,
                            Err(e) if kind(e.clone()) == RejectionKind::StaleInode => continue,
                            Err(e) => panic!("{e}"),
                        }
                    }
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let rk = bed.inode_key.read_key();
    let order = bed.server.store(&bed.inode_id).unwrap().order();
    let mut best: Option<VersionKey> = None;
    for d in &order {
        let o = fetch_verified(bed.server.as_ref(), &bed.inode_id, d, &rk).unwrap();
        if o.outer.inner.body.as_inode().unwrap().inode_number == 10 {
            let k = VersionKey {
                timestamp: o.outer.timestamp,
                digest: *d,
            };
            best = best.max(Some(k));
        }
    }
    assert_eq!(bed.mw.view_digests()[&10], best.unwrap().digest);
    assert_eq!(order.len(), 1 + 1 + 40);
}

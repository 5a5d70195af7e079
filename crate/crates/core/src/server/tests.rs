// SPDX-License-Identifier: Apache-2.0

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::block::{build_cfs_block, open_block, BlockBody, DataBlock, Identity};
use crate::crypto::{CapsuleWriteKey, KeyPair, Scheme};
use crate::merkle::verify_proof;
use crate::writer::CapsuleWriter;

struct Fixture {
    key: CapsuleWriteKey,
    author: KeyPair,
    meta: CapsuleMetadata,
}

impl Fixture {
    fn new() -> Self {
        let key = CapsuleWriteKey::generate(Scheme::Ed25519);
        let meta = CapsuleMetadata {
            name: "data".into(),
            block_size: 512,
            writer_key: *key.verifying_key(),
            nonce: 1,
        };
        Self {
            key,
            author: KeyPair::generate(Scheme::Ed25519),
            meta,
        }
    }

    fn writer(&self) -> CapsuleWriter {
        CapsuleWriter::new(self.key.clone(), self.meta.capsule_id())
    }

    fn inner(&self, payload: &[u8]) -> crate::block::CfsBlock {
        build_cfs_block(
            BlockBody::Data(DataBlock {
                payload: payload.to_vec(),
            }),
            Identity::new(*self.author.public(), 1000),
            &self.author,
        )
        .unwrap()
    }
}

/// Heads computed by scanning every block's prev_hash.
fn brute_force_leaves(store: &CapsuleStore) -> HashSet<Digest> {
    let order = store.order();
    let prevs: HashSet<Digest> = order
        .iter()
        .map(|d| {
            let (bytes, _) = store.get(d).unwrap();
            SealedBlock::decode(&bytes).unwrap().prev_hash
        })
        .collect();
    order.into_iter().filter(|d| !prevs.contains(d)).collect()
}

#[test]
fn first_append_has_verifiable_proof() {
    let fx = Fixture::new();
    let store = CapsuleStore::in_memory(fx.meta.clone());
    let mut w = fx.writer();
    let p = w.prepare(fx.inner(b"a"), 1, None);
    let receipt = store.append(&p.sealed, &p.root).unwrap();
    w.commit(&p);
    assert_eq!(receipt.sequence, 0);
    assert!(verify_proof(&receipt.digest, &receipt.proof, fx.key.verifying_key()));
}

#[test]
fn duplicate_append_is_idempotent() {
    let fx = Fixture::new();
    let store = CapsuleStore::in_memory(fx.meta.clone());
    let mut w = fx.writer();
    let p = w.prepare(fx.inner(b"a"), 1, None);
    let r1 = store.append(&p.sealed, &p.root).unwrap();
    w.commit(&p);
    let r2 = store.append(&p.sealed, &p.root).unwrap();
    assert_eq!(r1.digest, r2.digest);
    assert_eq!(store.order(), vec![r1.digest]);
}

#[test]
fn forged_outer_signature_is_rejected() {
    let fx = Fixture::new();
    let store = CapsuleStore::in_memory(fx.meta.clone());
    // Same capsule id, but sealed with a key that is not the capsule's.
    let rogue = CapsuleWriter::new(CapsuleWriteKey::generate(Scheme::Ed25519), fx.meta.capsule_id());
    let p = rogue.prepare(fx.inner(b"evil"), 1, None);
    assert!(matches!(
        store.append(&p.sealed, &p.root),
        Err(CapsuleError::RejectedWrite(_))
    ));
    assert!(store.is_empty());
}

#[test]
fn dangling_chain_and_root_mismatch() {
    let fx = Fixture::new();
    let store = CapsuleStore::in_memory(fx.meta.clone());
    let w = fx.writer();
    let p = w.prepare(fx.inner(b"a"), 1, Some(Digest([9; 32])));
    assert_eq!(
        store.append(&p.sealed, &p.root),
        Err(CapsuleError::DanglingChain(Digest([9; 32])))
    );

    let mut p = w.prepare(fx.inner(b"a"), 1, None);
    p.root = SignedRoot::sign(&fx.key, fx.meta.capsule_id(), 1, Digest([1; 32]));
    assert_eq!(store.append(&p.sealed, &p.root), Err(CapsuleError::RootMismatch));
}

#[test]
fn get_round_trip_not_found_and_tamper_detection() {
    let fx = Fixture::new();
    let store = CapsuleStore::in_memory(fx.meta.clone());
    let mut w = fx.writer();
    let mut digests = Vec::new();
    for i in 0..4u8 {
        let p = w.prepare(fx.inner(&[i; 10]), 1 + i as u64, None);
        store.append(&p.sealed, &p.root).unwrap();
        w.commit(&p);
        digests.push((p.digest, p.sealed));
    }
    for (d, bytes) in &digests {
        let (got, proof) = store.get(d).unwrap();
        assert_eq!(&got, bytes);
        assert!(verify_proof(d, &proof, fx.key.verifying_key()));
    }
    assert_eq!(store.get(&Digest([7; 32])), Err(CapsuleError::NotFound));

    // Dishonest server: serve block 1's bytes under block 0's digest.
    let rk = fx.key.read_key();
    store
        .replace_stored_bytes(&digests[0].0, digests[1].1.clone())
        .unwrap();
    let (bytes, _) = store.get(&digests[0].0).unwrap();
    assert!(open_block(&rk, &bytes, &digests[0].0).is_err());
    // Flipped ciphertext byte is caught too.
    let mut flipped = SealedBlock::decode(&digests[2].1).unwrap();
    flipped.ciphertext[20] ^= 1;
    store
        .replace_stored_bytes(&digests[2].0, flipped.encode())
        .unwrap();
    let (bytes, _) = store.get(&digests[2].0).unwrap();
    assert!(open_block(&rk, &bytes, &digests[2].0).is_err());
}

#[test]
fn leaves_follow_unreferenced_heads() {
    let fx = Fixture::new();
    let store = CapsuleStore::in_memory(fx.meta.clone());
    assert!(store.leaves().is_empty());

    let mut w = fx.writer();
    let mut chain = Vec::new();
    for i in 0..3u8 {
        let p = w.prepare(fx.inner(&[i]), 10 + i as u64, None);
        store.append(&p.sealed, &p.root).unwrap();
        w.commit(&p);
        chain.push(p.digest);
    }
    assert_eq!(store.leaves(), vec![chain[2]]);
    assert_eq!(brute_force_leaves(&store), HashSet::from([chain[2]]));

    // Fork off the middle block.
    let p = w.prepare(fx.inner(b"fork"), 20, Some(chain[1]));
    store.append(&p.sealed, &p.root).unwrap();
    w.commit(&p);
    let leaves: HashSet<_> = store.leaves().into_iter().collect();
    assert_eq!(leaves, HashSet::from([chain[2], p.digest]));
    assert_eq!(leaves, brute_force_leaves(&store));
}

#[test]
fn random_forest_leaves_match_brute_force() {
    let fx = Fixture::new();
    let store = CapsuleStore::in_memory(fx.meta.clone());
    let mut w = fx.writer();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut all: Vec<Digest> = Vec::new();
    for i in 0..60u64 {
        let prev = if all.is_empty() || rng.gen_bool(0.1) {
            Some(Digest::GENESIS)
        } else {
            Some(all[rng.gen_range(0..all.len())])
        };
        let p = w.prepare(fx.inner(&i.to_le_bytes()), i + 1, prev);
        store.append(&p.sealed, &p.root).unwrap();
        w.commit(&p);
        all.push(p.digest);
        let got: HashSet<_> = store.leaves().into_iter().collect();
        assert_eq!(got, brute_force_leaves(&store));
    }
}

#[test]
fn historical_proofs_verify() {
    let fx = Fixture::new();
    let store = CapsuleStore::in_memory(fx.meta.clone());
    let mut w = fx.writer();
    let mut ds = Vec::new();
    for i in 0..9u8 {
        let r = w.append(&store_service(&store), fx.inner(&[i]), 1 + i as u64).unwrap();
        ds.push(r.digest);
    }
    for size in 1..=9u64 {
        for seq in 0..size {
            let proof = store.proof(&ds[seq as usize], Some(size)).unwrap();
            assert_eq!(proof.root.tree_size, size);
            let oracle = MerkleTree::from_digests(&ds[..size as usize]);
            assert_eq!(proof.root.root, oracle.root().unwrap());
            assert!(verify_proof(&ds[seq as usize], &proof, fx.key.verifying_key()));
        }
    }
    assert!(store.proof(&ds[5], Some(3)).is_err());
}

/// Wrap one store as a service for the writer helper.
fn store_service(store: &CapsuleStore) -> SingleStore<'_> {
    SingleStore(store)
}

struct SingleStore<'a>(&'a CapsuleStore);

impl CapsuleService for SingleStore<'_> {
    fn append(&self, _: &Digest, s: &[u8], r: &SignedRoot) -> Result<AppendReceipt, CapsuleError> {
        self.0.append(s, r)
    }
    fn get(&self, _: &Digest, d: &Digest) -> Result<(Vec<u8>, MerkleProof), CapsuleError> {
        self.0.get(d)
    }
    fn leaves(&self, _: &Digest) -> Result<Vec<Digest>, CapsuleError> {
        Ok(self.0.leaves())
    }
    fn proof(&self, _: &Digest, d: &Digest, n: Option<u64>) -> Result<MerkleProof, CapsuleError> {
        self.0.proof(d, n)
    }
    fn len(&self, _: &Digest) -> Result<u64, CapsuleError> {
        Ok(self.0.len())
    }
    fn subscribe(&self, _: &Digest, _: u64) -> Result<Box<dyn Subscription>, CapsuleError> {
        Err(CapsuleError::Transport("unsupported".into()))
    }
}

#[test]
fn subscription_delivers_backlog_then_live_updates() {
    let fx = Fixture::new();
    let server = CapsuleServer::new();
    let store = server.host(CapsuleStore::in_memory(fx.meta.clone()));
    let cap = store.id();
    let mut w = fx.writer();
    for i in 0..3u8 {
        w.append(&server, fx.inner(&[i]), 1 + i as u64).unwrap();
    }
    let mut s1 = server.subscribe(&cap, 0).unwrap();
    let mut s2 = server.subscribe(&cap, 0).unwrap();
    let t = Duration::from_millis(50);
    let mut seen1 = Vec::new();
    while let Some((_, d)) = s1.next_timeout(t).unwrap() {
        seen1.push(d);
    }
    assert_eq!(seen1, store.order());

    let writer = std::thread::spawn(move || {
        for i in 3..6u8 {
            w.append(&server, fx.inner(&[i]), 1 + i as u64).unwrap();
        }
    });
    let mut seen2 = Vec::new();
    while seen2.len() < 6 {
        if let Some((seq, d)) = s2.next_timeout(Duration::from_secs(5)).unwrap() {
            assert_eq!(seq as usize, seen2.len());
            seen2.push(d);
        } else {
            panic!("live update never arrived");
        }
    }
    writer.join().unwrap();
    assert_eq!(seen2, store.order());
    assert_eq!(
        store.subscribe(7).err(),
        Some(CapsuleError::InvalidCursor { from: 7, len: 6 })
    );
}

#[test]
fn reconnecting_subscriber_sees_no_gaps_or_duplicates() {
    let fx = Fixture::new();
    let server = Arc::new(CapsuleServer::new());
    let store = server.host(CapsuleStore::in_memory(fx.meta.clone()));
    let cap = store.id();
    let srv = Arc::clone(&server);
    let writer = std::thread::spawn(move || {
        let mut w = fx.writer();
        for i in 0..200u64 {
            w.append(srv.as_ref(), fx.inner(&i.to_le_bytes()), i + 1).unwrap();
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut seen = Vec::new();
    let mut sub = server.subscribe(&cap, 0).unwrap();
    while seen.len() < 200 {
        if rng.gen_bool(0.05) {
            // Disconnect and resume from the last-seen cursor.
            sub = server.subscribe(&cap, seen.len() as u64).unwrap();
        }
        if let Some((seq, d)) = sub.next_timeout(Duration::from_secs(5)).unwrap() {
            assert_eq!(seq as usize, seen.len());
            seen.push(d);
        }
    }
    writer.join().unwrap();
    assert_eq!(seen, store.order());
}

#[test]
fn file_store_survives_reopen_and_index_loss() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.capsule");
    let fx = Fixture::new();
    let order = {
        let store = CapsuleStore::open(fx.meta.clone(), &path, true).unwrap();
        let mut w = fx.writer();
        for i in 0..5u8 {
            w.append(&store_service(&store), fx.inner(&[i; 40]), 1 + i as u64)
                .unwrap();
        }
        store.order()
    };

    let reopened = CapsuleStore::open(fx.meta.clone(), &path, true).unwrap();
    assert_eq!(reopened.order(), order);
    let (_, proof) = reopened.get(&order[4]).unwrap();
    assert!(verify_proof(&order[4], &proof, fx.key.verifying_key()));
    drop(reopened);

    // Corrupt the index: a full scan rebuilds it.
    let idx = dir.path().join("data.capsule.idx");
    let mut raw = std::fs::read(&idx).unwrap();
    raw[10] ^= 0xff;
    std::fs::write(&idx, raw).unwrap();
    let reopened = CapsuleStore::open(fx.meta.clone(), &path, true).unwrap();
    assert_eq!(reopened.order(), order);
    drop(reopened);

    // Torn tail: half a record is dropped, earlier blocks survive.
    let mut log = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    use std::io::Write;
    log.write_all(&[200, 0, 0, 0, 1, 2, 3]).unwrap();
    drop(log);
    std::fs::remove_file(&idx).unwrap();
    let reopened = CapsuleStore::open(fx.meta.clone(), &path, true).unwrap();
    assert_eq!(reopened.order(), order);
    let mut w = fx.writer();
    w.sync_from(&SubscribableStore(Arc::new(reopened))).unwrap();
    assert_eq!(w.len(), 5);
}

struct SubscribableStore(Arc<CapsuleStore>);

impl CapsuleService for SubscribableStore {
    fn append(&self, _: &Digest, s: &[u8], r: &SignedRoot) -> Result<AppendReceipt, CapsuleError> {
        self.0.append(s, r)
    }
    fn get(&self, _: &Digest, d: &Digest) -> Result<(Vec<u8>, MerkleProof), CapsuleError> {
        self.0.get(d)
    }
    fn leaves(&self, _: &Digest) -> Result<Vec<Digest>, CapsuleError> {
        Ok(self.0.leaves())
    }
    fn proof(&self, _: &Digest, d: &Digest, n: Option<u64>) -> Result<MerkleProof, CapsuleError> {
        self.0.proof(d, n)
    }
    fn len(&self, _: &Digest) -> Result<u64, CapsuleError> {
        Ok(self.0.len())
    }
    fn subscribe(&self, _: &Digest, from: u64) -> Result<Box<dyn Subscription>, CapsuleError> {
        Ok(Box::new(self.0.subscribe(from)?))
    }
}

#[test]
fn replay_of_order_reconstructs_identical_store() {
    let fx = Fixture::new();
    let original = CapsuleStore::in_memory(fx.meta.clone());
    let mut w = fx.writer();
    for i in 0..12u8 {
        w.append(&store_service(&original), fx.inner(&[i]), 1 + i as u64)
            .unwrap();
    }
    let replica = CapsuleStore::in_memory(fx.meta.clone()).into_follower();
    for seq in 0..original.len() {
        let (bytes, root) = original.record(seq).unwrap();
        replica.replicate(&bytes, &root).unwrap();
    }
    assert_eq!(replica.order(), original.order());
    assert_eq!(replica.leaves(), original.leaves());
    let (bytes, _) = original.record(0).unwrap();
    let (_, root) = original.record(0).unwrap();
    assert_eq!(replica.append(&bytes, &root), Err(CapsuleError::ReadOnly));
}

#[test]
fn follower_tracks_leader() {
    let fx = Fixture::new();
    let leader = Arc::new(CapsuleServer::new());
    let lstore = leader.host(CapsuleStore::in_memory(fx.meta.clone()));
    let mut w = fx.writer();
    for i in 0..4u8 {
        w.append(leader.as_ref(), fx.inner(&[i]), 1 + i as u64).unwrap();
    }
    let follower = Arc::new(CapsuleStore::in_memory(fx.meta.clone()).into_follower());
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let (f, l, s) = (Arc::clone(&follower), Arc::clone(&leader), Arc::clone(&stop));
    let handle = std::thread::spawn(move || {
        run_follower(&f, l.as_ref(), &|| s.load(Ordering::Relaxed)).unwrap();
    });
    for i in 4..8u8 {
        w.append(leader.as_ref(), fx.inner(&[i]), 1 + i as u64).unwrap();
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    while follower.len() < 8 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    stop.store(true, Ordering::Relaxed);
    handle.join().unwrap();
    assert_eq!(follower.order(), lstore.order());
}

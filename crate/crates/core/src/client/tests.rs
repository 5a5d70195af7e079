// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use super::*;
use crate::crypto::{CapsuleWriteKey, Scheme};
use crate::middleware::{Middleware, MiddlewarePolicy, MiddlewareSetup};
use crate::server::{CapsuleMetadata, CapsuleServer, CapsuleStore};

struct Fs {
    server: Arc<CapsuleServer>,
    mw: Arc<Middleware>,
    inode_id: Digest,
    data_id: Digest,
    inode_key: CapsuleReadKey,
    data_key: CapsuleReadKey,
    alice: KeyPair,
    bob: KeyPair,
    dir: TempDir,
}

impl Fs {
    /// Root directory writable by alice (uid 1000) and bob (uid 2000).
    fn new(block_size: usize) -> Self {
        let server = Arc::new(CapsuleServer::new());
        let ik = CapsuleWriteKey::generate(Scheme::Ed25519);
        let dk = CapsuleWriteKey::generate(Scheme::Ed25519);
        let meta = |name: &str, key: &CapsuleWriteKey| CapsuleMetadata {
            name: name.into(),
            block_size: block_size as u32,
            writer_key: *key.verifying_key(),
            nonce: 0,
        };
        let inode_id = server.host(CapsuleStore::in_memory(meta("inodes", &ik))).id();
        let data_id = server.host(CapsuleStore::in_memory(meta("data", &dk))).id();
        let mw = Middleware::start(MiddlewareSetup {
            server: server.clone(),
            inode_capsule: inode_id,
            inode_key: ik.clone(),
            data_capsule: data_id,
            data_key: dk.clone(),
            block_size,
            admin: KeyPair::generate(Scheme::Ed25519),
            policy: MiddlewarePolicy::default(),
            revocation_list: None,
        })
        .unwrap();
        let alice = KeyPair::generate(Scheme::Ed25519);
        let bob = KeyPair::generate(Scheme::Ed25519);
        mw.init_root(&[Identity::new(*alice.public(), 1000), Identity::new(*bob.public(), 2000)])
            .unwrap();
        Self {
            server,
            mw: Arc::new(mw),
            inode_id,
            data_id,
            inode_key: ik.read_key(),
            data_key: dk.read_key(),
            alice,
            bob,
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn setup(&self, key: &KeyPair, name: &str, config: ClientConfig) -> ClientSetup {
        ClientSetup {
            capsules: self.server.clone(),
            writer: self.mw.clone(),
            inode_capsule: self.inode_id,
            data_capsule: self.data_id,
            inode_key: self.inode_key.clone(),
            data_key: self.data_key.clone(),
            keypair: key.clone(),
            journal_dir: Some(self.dir.path().join(name)),
            config,
            snapshot_ts: None,
        }
    }

    fn client(&self, key: &KeyPair, name: &str, block_size: usize) -> Client {
        let config = ClientConfig {
            block_size,
            ..ClientConfig::default()
        };
        Client::mount(self.setup(key, name, config)).unwrap()
    }
}

const A: Uid = 1000;
const B: Uid = 2000;

fn puts_of(c: &Client) -> u64 {
    c.stats.puts.load(Ordering::SeqCst)
}

#[test]
fn read_own_writes_before_and_after_flush() {
    let fs = Fs::new(64);
    let c = fs.client(&fs.alice, "a", 64);
    let f = c.create(ROOT_INODE, "hello.txt", InodeKind::File, A).unwrap();
    c.write(f, 0, b"hello, world", A).unwrap();
    assert_eq!(c.read_all(f).unwrap(), b"hello, world");
    assert!(c.getattr(f).unwrap().pending);
    assert_eq!(puts_of(&c), 0);
    let r = c.flush().unwrap();
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    assert_eq!(c.pending(), 0);
    assert!(!c.getattr(f).unwrap().pending);
    assert_eq!(c.read_all(f).unwrap(), b"hello, world");
    assert_eq!(c.lookup("/hello.txt").unwrap(), f);

    let other = fs.client(&fs.bob, "b", 64);
    assert_eq!(other.lookup("hello.txt").unwrap(), f);
    assert_eq!(other.read_all(f).unwrap(), b"hello, world");
}

#[test]
fn small_write_to_existing_file_is_two_puts() {
    let fs = Fs::new(64);
    let c = fs.client(&fs.alice, "a", 64);
    let f = c.create(ROOT_INODE, "f", InodeKind::File, A).unwrap();
    c.write(f, 0, &[7u8; 200], A).unwrap();
    c.flush().unwrap();
    let before = puts_of(&c);
    c.write(f, 70, b"xyz", A).unwrap();
    let r = c.flush().unwrap();
    assert_eq!(puts_of(&c) - before, 2);
    assert_eq!(r.puts, 2);
    let mut want = vec![7u8; 200];
    want[70..73].copy_from_slice(b"xyz");
    assert_eq!(c.read_all(f).unwrap(), want);
}

#[test]
fn coalescing_collapses_repeated_writes() {
    for coalesce in [true, false] {
        let fs = Fs::new(64);
        let mut config = ClientConfig {
            block_size: 64,
            ..ClientConfig::default()
        };
        config.journal.coalesce = coalesce;
        let c = Client::mount(fs.setup(&fs.alice, "a", config)).unwrap();
        let f = c.create(ROOT_INODE, "f", InodeKind::File, A).unwrap();
        c.write(f, 0, b"seed", A).unwrap();
        c.flush().unwrap();
        let before = puts_of(&c);
        for i in 0..50u8 {
            c.write(f, 0, &[i; 10], A).unwrap();
        }
        c.flush().unwrap();
        let n = puts_of(&c) - before;
        if coalesce {
            assert_eq!(n, 2);
        } else {
            assert!(n >= 51, "{n}");
        }
        assert_eq!(c.read_all(f).unwrap(), vec![49u8; 10]);
        let fresh = fs.client(&fs.bob, "b", 64);
        assert_eq!(fresh.read_all(f).unwrap(), vec![49u8; 10]);
    }
}

/// Random writes, truncates and re-reads against a byte-vector model,
/// with flushes and fresh mounts interleaved.
#[test]
fn random_writes_match_reference_model() {
    let bs = 32;
    let fs = Fs::new(bs);
    let mut c = fs.client(&fs.alice, "a", bs);
    let f = c.create(ROOT_INODE, "model", InodeKind::File, A).unwrap();
    let mut model: Vec<u8> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for step in 0..300 {
        match rng.gen_range(0..10) {
            0..=5 => {
                let off = rng.gen_range(0..=model.len() as u64 + 40);
                let len = rng.gen_range(1..90);
                let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                c.write(f, off, &data, A).unwrap();
                let end = off as usize + len;
                if model.len() < end {
                    model.resize(end, 0);
                }
                model[off as usize..end].copy_from_slice(&data);
            }
            6 => {
                let size = rng.gen_range(0..=model.len() + 50);
                c.truncate(f, size as u64, A).unwrap();
                model.resize(size, 0);
            }
            7 => {
                let r = c.flush().unwrap();
                assert!(r.failures.is_empty(), "{:?}", r.failures);
            }
            8 if step % 5 == 0 => {
                c.flush().unwrap();
                drop(c);
                c = fs.client(&fs.alice, "a", bs);
            }
            _ => {
                let off = rng.gen_range(0..=model.len() + 5);
                let len = rng.gen_range(0..100);
                let end = model.len().min(off + len);
                let want = if off < end { &model[off..end] } else { &[][..] };
                assert_eq!(c.read(f, off as u64, len as u64).unwrap(), want, "step {step}");
            }
        }
        assert_eq!(c.getattr(f).unwrap().size, model.len() as u64);
    }
    c.flush().unwrap();
    assert_eq!(c.read_all(f).unwrap(), model);
    assert_eq!(fs.client(&fs.bob, "b", bs).read_all(f).unwrap(), model);
}

#[test]
fn write_spanning_blocks_touches_only_those_blocks() {
    let fs = Fs::new(512);
    let c = fs.client(&fs.alice, "a", 512);
    let f = c.create(ROOT_INODE, "f", InodeKind::File, A).unwrap();
    c.write(f, 0, &vec![1u8; 2048], A).unwrap();
    c.flush().unwrap();
    let before = puts_of(&c);
    c.write(f, 500, &[9u8; 24], A).unwrap();
    c.flush().unwrap();
    // Blocks 0 and 1 plus the inode.
    assert_eq!(puts_of(&c) - before, 3);
    let got = c.read_all(f).unwrap();
    assert_eq!(&got[500..524], &[9u8; 24]);
    assert_eq!(got.len(), 2048);
}

#[test]
fn directories_and_names() {
    let fs = Fs::new(64);
    let c = fs.client(&fs.alice, "a", 64);
    let d = c.mkdir(ROOT_INODE, "docs", A).unwrap();
    let f = c.create(d, "a.txt", InodeKind::File, A).unwrap();
    assert_eq!(c.create(d, "a.txt", InodeKind::File, A), Err(FsError::Exists));
    assert!(matches!(c.create(d, "x/y", InodeKind::File, A), Err(FsError::InvalidArgument(_))));
    assert_eq!(c.create(f, "z", InodeKind::File, A), Err(FsError::NotADirectory));
    assert_eq!(c.lookup("/docs/a.txt").unwrap(), f);
    assert_eq!(c.lookup("/docs/../docs/./a.txt").unwrap(), f);
    assert_eq!(c.unlink(ROOT_INODE, "docs", A), Err(FsError::NotEmpty));
    assert_eq!(c.getattr(d).unwrap().nlink, 2);
    c.flush().unwrap();

    c.rename(d, "a.txt", ROOT_INODE, "b.txt", A).unwrap();
    assert_eq!(c.lookup("/docs/a.txt"), Err(FsError::NotFound));
    assert_eq!(c.lookup("/b.txt").unwrap(), f);
    c.unlink(ROOT_INODE, "docs", A).unwrap();
    c.flush().unwrap();

    let other = fs.client(&fs.bob, "b", 64);
    let names: Vec<String> = other.readdir(ROOT_INODE).unwrap().into_iter().map(|e| e.name).collect();
    assert_eq!(names, vec!["b.txt".to_string()]);
    assert_eq!(other.lookup("/docs"), Err(FsError::NotFound));
}

#[test]
fn create_then_delete_before_flush_sends_nothing() {
    let fs = Fs::new(64);
    let c = fs.client(&fs.alice, "a", 64);
    let f = c.create(ROOT_INODE, "tmp", InodeKind::File, A).unwrap();
    c.write(f, 0, b"scratch", A).unwrap();
    c.unlink(ROOT_INODE, "tmp", A).unwrap();
    c.flush().unwrap();
    assert_eq!(puts_of(&c), 0);
    assert_eq!(c.pending(), 0);
    assert_eq!(c.lookup("tmp"), Err(FsError::NotFound));
}

#[test]
fn concurrent_creates_get_distinct_inodes() {
    let fs = Fs::new(64);
    let c = Arc::new(fs.client(&fs.alice, "a", 64));
    let handles: Vec<_> = (0..4)
        .map(|t| {
            let c = Arc::clone(&c);
            std::thread::spawn(move || {
                (0..25)
                    .map(|i| c.create(ROOT_INODE, &format!("f{t}-{i}"), InodeKind::File, A).unwrap())
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    let flusher = c.spawn_flusher(Duration::from_millis(5));
    let mut all: Vec<InodeNumber> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    flusher.stop();
    c.flush().unwrap();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 100);
    let fresh = fs.client(&fs.bob, "b", 64);
    assert_eq!(fresh.readdir(ROOT_INODE).unwrap().len(), 100);
}

#[test]
fn foreign_authors_map_to_nobody() {
    let fs = Fs::new(64);
    let a = fs.client(&fs.alice, "a", 64);
    let f = a.create(ROOT_INODE, "f", InodeKind::File, A).unwrap();
    a.flush().unwrap();
    assert_eq!(a.getattr(f).unwrap().uid, A);
    let b = fs.client(&fs.bob, "b", 64);
    assert_eq!(b.getattr(f).unwrap().uid, DEFAULT_NOBODY_UID);
    let alice_id = Identity::new(*fs.alice.public(), 1234);
    assert_eq!(map_author(&alice_id, fs.bob.public(), 77), 77);
    assert_eq!(map_author(&alice_id, fs.alice.public(), 77), 1234);
}

#[test]
fn acl_changes() {
    let fs = Fs::new(64);
    let a = fs.client(&fs.alice, "a", 64);
    let f = a.create(ROOT_INODE, "private", InodeKind::File, A).unwrap();
    a.flush().unwrap();
    let only_alice = Acl::new([Identity::new(*fs.alice.public(), A)]);
    a.set_acl(f, only_alice.clone(), A).unwrap();
    assert!(matches!(a.set_acl(f, Acl::new([]), A), Err(FsError::InvalidArgument(_))));
    a.flush().unwrap();

    let b = fs.client(&fs.bob, "b", 64);
    assert_eq!(b.getattr(f).unwrap().acl, only_alice);
    assert_eq!(b.write(f, 0, b"x", B), Err(FsError::PermissionDenied));
    assert_eq!(b.set_acl(f, Acl::new([Identity::new(*fs.bob.public(), B)]), B), Err(FsError::PermissionDenied));

    // Without the advisory check the middleware still refuses.
    let cfg = ClientConfig {
        block_size: 64,
        advisory_checks: false,
        ..ClientConfig::default()
    };
    let b2 = Client::mount(fs.setup(&fs.bob, "b2", cfg)).unwrap();
    b2.write(f, 0, b"x", B).unwrap();
    let r = b2.flush().unwrap();
    assert_eq!(r.failures.len(), 1);
    assert!(r.failures[0].1.contains("forbidden"), "{:?}", r.failures);
    b2.sync().unwrap();
    assert_eq!(b2.read_all(f).unwrap(), b"");
}

#[test]
fn concurrent_changes_to_different_fields_merge() {
    let fs = Fs::new(64);
    let a = fs.client(&fs.alice, "a", 64);
    let f = a.create(ROOT_INODE, "shared", InodeKind::File, A).unwrap();
    a.write(f, 0, b"v1", A).unwrap();
    a.flush().unwrap();
    let b = fs.client(&fs.bob, "b", 64);

    let acl = Acl::new([Identity::new(*fs.alice.public(), A), Identity::new(*fs.bob.public(), B), Identity::new(*fs.bob.public(), 1)]);
    a.set_acl(f, acl.clone(), A).unwrap();
    b.write(f, 0, b"bob-data", B).unwrap();
    a.flush().unwrap();
    let r = b.flush().unwrap();
    assert_eq!(r.rebases, 1);
    assert!(r.failures.is_empty());

    a.sync().unwrap();
    for c in [&a, &b] {
        assert_eq!(c.read_all(f).unwrap(), b"bob-data");
        assert_eq!(c.getattr(f).unwrap().acl, acl);
    }
    assert_eq!(a.view_digests(), b.view_digests());
}

#[test]
fn write_to_file_deleted_elsewhere_is_dropped() {
    let fs = Fs::new(64);
    let a = fs.client(&fs.alice, "a", 64);
    let f = a.create(ROOT_INODE, "doomed", InodeKind::File, A).unwrap();
    a.write(f, 0, b"x", A).unwrap();
    a.flush().unwrap();
    let b = fs.client(&fs.bob, "b", 64);
    a.unlink(ROOT_INODE, "doomed", A).unwrap();
    a.flush().unwrap();
    b.write(f, 0, b"late", B).unwrap();
    let r = b.flush().unwrap();
    assert_eq!(r.failures.len(), 1);
    assert_eq!(b.pending(), 0);
    assert_eq!(b.lookup("doomed"), Err(FsError::NotFound));
}

#[test]
fn snapshot_shows_state_as_of_timestamp() {
    let fs = Fs::new(64);
    let c = fs.client(&fs.alice, "a", 64);
    let f = c.create(ROOT_INODE, "v", InodeKind::File, A).unwrap();
    let mut stamps = Vec::new();
    for i in 0..5u8 {
        c.write(f, 0, &[b'0' + i; 3], A).unwrap();
        c.flush().unwrap();
        stamps.push(c.getattr(f).unwrap().mtime_us);
    }
    for (i, ts) in stamps.iter().enumerate() {
        let s = c.snapshot(*ts).unwrap();
        assert!(s.is_read_only());
        assert_eq!(s.read_all(f).unwrap(), vec![b'0' + i as u8; 3]);
        assert_eq!(s.write(f, 0, b"no", A), Err(FsError::ReadOnly));
        assert_eq!(s.flush(), Err(FsError::ReadOnly));
    }
    let before = c.snapshot(stamps[0] - 1).unwrap();
    assert!(before.lookup("v").is_err() || before.read_all(f).unwrap().is_empty());
}

#[test]
fn crash_mid_flush_recovers_from_journal() {
    for stop_after in 0..6u64 {
        for crash_after_ack in [false, true] {
            let fs = Fs::new(16);
            let c = fs.client(&fs.alice, "a", 16);
            let f = c.create(ROOT_INODE, "f", InodeKind::File, A).unwrap();
            let g = c.create(ROOT_INODE, "g", InodeKind::File, A).unwrap();
            c.write(f, 0, &[1u8; 40], A).unwrap();
            c.write(g, 0, b"gee", A).unwrap();
            c.set_crash_plan(CrashPlan {
                stop_after_puts: Some(stop_after),
                crash_after_ack,
            });
            let crashed = matches!(c.flush(), Err(FsError::Crashed));
            drop(c);
            let c = fs.client(&fs.alice, "a", 16);
            assert_eq!(c.read_all(f).unwrap(), vec![1u8; 40], "{stop_after} {crashed}");
            let r = c.flush().unwrap();
            assert!(r.failures.is_empty(), "{:?}", r.failures);
            assert_eq!(c.pending(), 0);
            let fresh = fs.client(&fs.bob, "b", 16);
            assert_eq!(fresh.read_all(f).unwrap(), vec![1u8; 40]);
            assert_eq!(fresh.read_all(g).unwrap(), b"gee");
            assert_eq!(fresh.readdir(ROOT_INODE).unwrap().len(), 2);
        }
    }
}

#[test]
fn cached_reads_stop_hitting_the_server() {
    let fs = Fs::new(64);
    let c = fs.client(&fs.alice, "a", 64);
    let f = c.create(ROOT_INODE, "f", InodeKind::File, A).unwrap();
    c.write(f, 0, &[5u8; 640], A).unwrap();
    c.flush().unwrap();
    let b = fs.client(&fs.bob, "b", 64);
    b.read_all(f).unwrap();
    let gets = b.stats.server_gets.load(Ordering::SeqCst);
    assert_eq!(gets, 10);
    assert_eq!(b.read_all(f).unwrap(), vec![5u8; 640]);
    assert_eq!(b.stats.server_gets.load(Ordering::SeqCst), gets);
}

#[test]
fn wrong_read_key_fails_mount() {
    let fs = Fs::new(64);
    let mut setup = fs.setup(&fs.alice, "a", ClientConfig::default());
    setup.inode_key = CapsuleWriteKey::generate(Scheme::Ed25519).read_key();
    assert!(matches!(Client::mount(setup), Err(FsError::Mount(_))));
}

#[test]
fn journal_survives_restart_without_flush() {
    let fs = Fs::new(64);
    let c = fs.client(&fs.alice, "a", 64);
    let f = c.create(ROOT_INODE, "f", InodeKind::File, A).unwrap();
    c.write(f, 0, b"durable", A).unwrap();
    drop(c);
    let c = fs.client(&fs.alice, "a", 64);
    assert_eq!(c.read_all(f).unwrap(), b"durable");
    let g = c.create(ROOT_INODE, "g", InodeKind::File, A).unwrap();
    assert_ne!(f, g);
    c.flush().unwrap();
    assert_eq!(fs.client(&fs.bob, "b", 64).read_all(f).unwrap(), b"durable");
}

#[test]
fn rebase_keeps_only_our_fields() {
    let me = Identity::new(*KeyPair::from_seed(Scheme::Null, [1; 32]).public(), 1);
    let them = Identity::new(*KeyPair::from_seed(Scheme::Null, [2; 32]).public(), 2);
    let base = InodeBlock {
        inode_number: 9,
        parent_inode: 1,
        name: "n".into(),
        kind: InodeKind::File,
        deleted: false,
        size: 0,
        data_hashes: vec![],
        acl: Acl::new([me]),
        updated_by: me,
        version_of: None,
    };
    let mut ours = base.clone();
    ours.size = 3;
    ours.data_hashes = vec![Digest([3; 32])];
    ours.name = "mine".into();
    let mut winner = base.clone();
    winner.acl = Acl::new([me, them]);
    winner.name = "theirs".into();
    winner.updated_by = them;
    let w = Digest([8; 32]);

    let r = rebase(&ours, changes::DATA, &winner, w).unwrap();
    assert_eq!((r.size, r.name.as_str(), &r.acl), (3, "theirs", &winner.acl));
    assert_eq!((r.updated_by, r.version_of), (me, Some(w)));
    let r = rebase(&ours, changes::DATA | changes::NAME, &winner, w).unwrap();
    assert_eq!(r.name, "mine");

    winner.deleted = true;
    assert!(rebase(&ours, changes::DATA, &winner, w).is_none());
    let mut del = ours.clone();
    del.deleted = true;
    assert!(rebase(&del, changes::DELETED, &winner, w).unwrap().deleted);
}

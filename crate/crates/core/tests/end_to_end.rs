// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use capsulefs::block::{Acl, InodeKind, ROOT_INODE};
use capsulefs::client::FsError;
use capsulefs::harness::{Stack, StackOptions, Transport};

fn stack(transport: Transport) -> Stack {
    Stack::boot(StackOptions {
        transport,
        ..StackOptions::default()
    })
    .unwrap()
}

fn share_and_read(transport: Transport) {
    let s = stack(transport);
    let alice = s.mount_default("alice").unwrap();
    let bob = s.mount_default("bob").unwrap();

    let f = alice.create(ROOT_INODE, "notes", InodeKind::File, 1000).unwrap();
    let text = vec![b'z'; 3000];
    alice.write(f, 0, &text, 1000).unwrap();
    assert!(alice.flush().unwrap().failures.is_empty());

    bob.sync().unwrap();
    let n = bob.lookup("/notes").unwrap();
    assert_eq!(bob.read_all(n).unwrap(), text);
    assert_eq!(alice.getattr(n).unwrap().uid, 1000);
    assert_eq!(bob.getattr(n).unwrap().uid, 65534, "foreign author maps to nobody");
    assert_eq!(s.audit.violations(), Vec::<String>::new());
}

#[test]
fn two_users_share_a_file_in_process() {
    share_and_read(Transport::InProcess);
}

#[test]
fn two_users_share_a_file_over_tcp() {
    share_and_read(Transport::Tcp);
}

#[test]
fn acl_change_locks_out_the_other_user() {
    let s = stack(Transport::InProcess);
    let alice = s.mount_default("alice").unwrap();
    let bob = s.mount_default("bob").unwrap();
    let f = alice.create(ROOT_INODE, "mine", InodeKind::File, 1000).unwrap();
    alice.set_acl(f, Acl::new([s.user("alice").identity()]), 1000).unwrap();
    alice.flush().unwrap();

    bob.sync().unwrap();
    assert_eq!(bob.write(f, 0, b"no", 2000), Err(FsError::PermissionDenied));
    assert_eq!(bob.read_all(f).unwrap(), b"");
}

#[test]
fn tampered_put_is_rejected_and_nothing_is_stored() {
    let s = stack(Transport::InProcess);
    let alice = s.mount_default("alice").unwrap();
    let f = alice.create(ROOT_INODE, "t", InodeKind::File, 1000).unwrap();
    alice.flush().unwrap();
    let before = s.data_store().len();

    s.set_put_tamper(Some(Arc::new(|bytes: &mut Vec<u8>| {
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
    })));
    alice.write(f, 0, b"payload", 1000).unwrap();
    let r = alice.flush().unwrap();
    assert!(!r.failures.is_empty());
    assert_eq!(s.data_store().len(), before);
}

#[test]
fn snapshot_sees_the_old_contents() {
    let s = stack(Transport::InProcess);
    let alice = s.mount_default("alice").unwrap();
    let f = alice.create(ROOT_INODE, "v", InodeKind::File, 1000).unwrap();
    alice.write(f, 0, b"first", 1000).unwrap();
    alice.flush().unwrap();
    let ts = alice.getattr(f).unwrap().mtime_us;
    alice.write(f, 0, b"SECOND", 1000).unwrap();
    alice.flush().unwrap();

    let old = alice.snapshot(ts).unwrap();
    assert!(old.is_read_only());
    assert_eq!(old.read_all(f).unwrap(), b"first");
    assert_eq!(old.write(f, 0, b"x", 1000), Err(FsError::ReadOnly));
    assert_eq!(alice.read_all(f).unwrap(), b"SECOND");
}

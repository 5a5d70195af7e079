// SPDX-License-Identifier: Apache-2.0

//! Multi-writer convergence: several clients apply a random interleaving
//! of operations through one middleware. After quiescence every replica of
//! the inode state must equal the timestamp-rule winner computed directly
//! from the capsule.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{HarnessError, Stack, StackOptions, Transport, UserSpec};
use crate::block::{open_block, Acl, BlockBody, InodeKind, InodeNumber, VersionKey, ROOT_INODE};
use crate::client::{Client, FsError};
use crate::crypto::Digest;

#[derive(Clone, Debug, Default, Serialize)]
pub struct ConvergenceReport {
    pub seed: u64,
    pub ops: usize,
    pub applied: usize,
    pub inodes: usize,
    pub puts: u64,
    pub divergences: Vec<String>,
}

/// Winner per inode by `(timestamp, digest)`, straight from the capsule.
pub fn reference_winners(stack: &Stack) -> Result<HashMap<InodeNumber, Digest>, HarnessError> {
    let store = stack.inode_store();
    let mut best: HashMap<InodeNumber, VersionKey> = HashMap::new();
    for digest in store.order() {
        let (bytes, _) = store.get(&digest)?;
        let Ok(opened) = open_block(&stack.inode_read, &bytes, &digest) else { continue };
        let BlockBody::Inode(b) = &opened.outer.inner.body else { continue };
        let key = VersionKey {
            timestamp: opened.outer.timestamp,
            digest,
        };
        let e = best.entry(b.inode_number).or_insert(key);
        if key > *e {
            *e = key;
        }
    }
    Ok(best.into_iter().map(|(n, k)| (n, k.digest)).collect())
}

fn ignorable(e: &FsError) -> bool {
    matches!(
        e,
        FsError::NotFound
            | FsError::Exists
            | FsError::PermissionDenied
            | FsError::NotEmpty
            | FsError::IsADirectory
            | FsError::NotADirectory
    )
}

fn random_file(c: &Client, rng: &mut ChaCha8Rng) -> Option<InodeNumber> {
    let entries = c.readdir(ROOT_INODE).ok()?;
    let files: Vec<_> = entries.iter().filter(|e| e.kind == InodeKind::File).collect();
    files.choose(rng).map(|e| e.inode)
}

/// Flush and sync every client until nothing is pending anywhere.
pub fn quiesce(clients: &[Client]) -> Result<(), HarnessError> {
    for _ in 0..20 {
        for c in clients {
            c.flush()?;
        }
        for c in clients {
            c.sync()?;
        }
        if clients.iter().all(|c| c.pending() == 0) {
            return Ok(());
        }
    }
    Err(HarnessError::Invalid("clients did not quiesce".into()))
}

pub fn run_convergence(
    seed: u64,
    clients: usize,
    ops: usize,
    transport: Transport,
) -> Result<ConvergenceReport, HarnessError> {
    let names: Vec<String> = (0..clients).map(|i| format!("user{i}")).collect();
    let stack = Stack::boot(StackOptions {
        block_size: 64,
        transport,
        users: names
            .iter()
            .enumerate()
            .map(|(i, n)| UserSpec::member(n, 1000 + i as u32))
            .collect(),
        ..StackOptions::default()
    })?;
    let mounted = names
        .iter()
        .map(|n| stack.mount_default(n))
        .collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<_> = names.iter().map(|n| stack.user(n).identity()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut applied = 0;
    for step in 0..ops {
        let who = rng.gen_range(0..clients);
        let c = &mounted[who];
        let uid = ids[who].uid;
        let res: Result<(), FsError> = match rng.gen_range(0..100) {
            0..=19 => c
                .create(ROOT_INODE, &format!("f{}", rng.gen_range(0..12)), InodeKind::File, uid)
                .map(|_| ()),
            20..=54 => match random_file(c, &mut rng) {
                Some(f) => {
                    let off = rng.gen_range(0..200);
                    let len = rng.gen_range(1..150);
                    let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                    c.write(f, off, &data, uid).map(|_| ())
                }
                None => Ok(()),
            },
            55..=64 => match random_file(c, &mut rng) {
                Some(f) => {
                    let mut members: Vec<_> = ids.iter().copied().filter(|_| rng.gen_bool(0.7)).collect();
                    if members.is_empty() {
                        members.push(ids[who]);
                    }
                    c.set_acl(f, Acl::new(members), uid)
                }
                None => Ok(()),
            },
            65..=72 => {
                let name = format!("f{}", rng.gen_range(0..12));
                c.unlink(ROOT_INODE, &name, uid)
            }
            73..=87 => c.flush().map(|_| ()),
            _ => c.sync().map(|_| ()),
        };
        match res {
            Ok(()) => applied += 1,
            Err(e) if ignorable(&e) => {}
            Err(e) => return Err(HarnessError::Invalid(format!("seed {seed} step {step}: {e}"))),
        }
    }
    quiesce(&mounted)?;

    let oracle = reference_winners(&stack)?;
    let mut divergences = Vec::new();
    let mut compare = |who: &str, got: HashMap<InodeNumber, Digest>| {
        if got != oracle {
            let mut keys: Vec<_> = got.keys().chain(oracle.keys()).copied().collect();
            keys.sort();
            keys.dedup();
            for n in keys {
                if got.get(&n) != oracle.get(&n) {
                    divergences.push(format!("seed {seed}: {who} disagrees on inode {n}"));
                }
            }
        }
    };
    for (i, c) in mounted.iter().enumerate() {
        compare(&names[i], c.view_digests());
    }
    compare("middleware", stack.middleware.view_digests());
    compare("audit", stack.audit.view_digests());
    for v in stack.audit.violations() {
        divergences.push(format!("seed {seed}: audit violation {v}"));
    }
    Ok(ConvergenceReport {
        seed,
        ops,
        applied,
        inodes: oracle.len(),
        puts: stack.puts.total(),
        divergences,
    })
}

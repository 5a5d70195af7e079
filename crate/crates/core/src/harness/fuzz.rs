// SPDX-License-Identifier: Apache-2.0

//! PUT fuzzer: valid requests, randomly corrupted, sent straight to the
//! middleware. The redundant auditor is the oracle for what was admitted.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{HarnessError, Stack, StackOptions, UserSpec};
use crate::block::{
    build_cfs_block, Acl, BlockBody, CfsBlock, DataBlock, Identity, InodeBlock, InodeKind, ROOT_INODE,
};
use crate::codec::Canonical;
use crate::crypto::{Digest, KeyPair};
use crate::middleware::PutRequest;
use crate::service::PutError;

#[derive(Clone, Debug, Default, Serialize)]
pub struct FuzzReport {
    pub sent: u64,
    pub admitted: u64,
    pub rejected: BTreeMap<String, u64>,
    pub mutations: BTreeMap<&'static str, u64>,
    /// Blocks the auditor saw during the run, setup excluded.
    pub audit_examined: u64,
    pub violations: Vec<String>,
}

const MUTATIONS: [&str; 12] = [
    "flip-signature",
    "change-uid",
    "swap-author-key",
    "resign-outsider",
    "outsider-adds-self-to-acl",
    "random-expected",
    "drop-expected",
    "stale-expected",
    "claim-other-inode",
    "swap-capsule",
    "flip-block-byte",
    "revoked-author",
];

struct Fuzzer<'a> {
    stack: &'a Stack,
    rng: ChaCha8Rng,
    alice: Identity,
    alice_key: KeyPair,
    mallory: KeyPair,
    carol: KeyPair,
    /// Earlier digests per inode, for stale versions.
    history: BTreeMap<u64, Vec<Digest>>,
}

impl Fuzzer<'_> {
    /// A request the middleware should accept as-is.
    fn valid(&mut self) -> PutRequest {
        let view = self.stack.middleware.view();
        let mut files: Vec<_> = view
            .inodes()
            .filter(|e| !e.block.deleted && e.block.inode_number != ROOT_INODE)
            .map(|e| (e.digest(), e.block.clone()))
            .collect();
        files.sort_by_key(|(_, b)| b.inode_number);
        let choice = self.rng.gen_range(0..3);
        if files.is_empty() || choice == 0 {
            let n = self.rng.gen_range(1u64 << 32..1u64 << 40);
            let body = InodeBlock {
                inode_number: n,
                parent_inode: ROOT_INODE,
                name: format!("fz{n}"),
                kind: InodeKind::File,
                deleted: false,
                size: 0,
                data_hashes: vec![],
                acl: Acl::new([self.alice]),
                updated_by: self.alice,
                version_of: None,
            };
            return self.inode_request(body, None);
        }
        let (digest, block) = files.choose(&mut self.rng).cloned().unwrap();
        if choice == 1 && !block.is_dir() {
            let len = self.rng.gen_range(1..=self.stack.options.block_size);
            let payload: Vec<u8> = (0..len).map(|_| self.rng.gen()).collect();
            let cfs = build_cfs_block(BlockBody::Data(DataBlock { payload }), self.alice, &self.alice_key).unwrap();
            return PutRequest::new(self.stack.data_capsule, &cfs, block.inode_number, None);
        }
        let mut body = block;
        body.name = format!("fz{}-{}", body.inode_number, self.rng.gen::<u16>());
        body.updated_by = self.alice;
        body.version_of = Some(digest);
        self.inode_request(body, Some(digest))
    }

    fn inode_request(&self, body: InodeBlock, expected: Option<Digest>) -> PutRequest {
        let n = body.inode_number;
        let cfs = build_cfs_block(BlockBody::Inode(body), self.alice, &self.alice_key).unwrap();
        PutRequest::new(self.stack.inode_capsule, &cfs, n, expected)
    }

    fn mutate(&mut self, req: &mut PutRequest, m: &'static str) {
        let Ok(mut block) = CfsBlock::decode(&req.block) else { return };
        let mut resign: Option<KeyPair> = None;
        match m {
            "flip-signature" => {
                if let Some(b) = block.client_signature.bytes.first_mut() {
                    *b ^= 0x40;
                } else {
                    block.client_signature.bytes.push(1);
                }
            }
            "change-uid" => block.author.uid = block.author.uid.wrapping_add(1),
            "swap-author-key" => block.author.key = *self.mallory.public(),
            "resign-outsider" => resign = Some(self.mallory.clone()),
            "outsider-adds-self-to-acl" => {
                if let BlockBody::Inode(b) = &mut block.body {
                    let me = Identity::new(*self.mallory.public(), 666);
                    b.acl = b.acl.with(me);
                }
                resign = Some(self.mallory.clone());
            }
            "random-expected" => req.expected_version = Some(Digest(self.rng.gen())),
            "drop-expected" => req.expected_version = None,
            "stale-expected" => {
                let old = self.history.get(&req.claimed_inode).and_then(|h| h.first().copied());
                req.expected_version = Some(old.unwrap_or(Digest([7; 32])));
            }
            "claim-other-inode" => req.claimed_inode = req.claimed_inode.wrapping_add(self.rng.gen_range(1..5)),
            "swap-capsule" => {
                req.capsule_id = if req.capsule_id == self.stack.inode_capsule {
                    self.stack.data_capsule
                } else {
                    self.stack.inode_capsule
                }
            }
            "flip-block-byte" => {
                let mut bytes = block.encode();
                let i = self.rng.gen_range(0..bytes.len());
                bytes[i] ^= 1 << self.rng.gen_range(0..8);
                req.block = bytes;
                return;
            }
            "revoked-author" => resign = Some(self.carol.clone()),
            _ => unreachable!("unknown mutation {m}"),
        }
        if let Some(key) = resign {
            let author = Identity::new(*key.public(), block.author.uid);
            if let BlockBody::Inode(b) = &mut block.body {
                b.updated_by = author;
            }
            block = build_cfs_block(block.body, author, &key).unwrap();
        }
        req.block = block.encode();
    }
}

/// Send `count` fuzzed PUTs; some unmutated, most with 1-3 corruptions.
pub fn fuzz_puts(base: &StackOptions, count: u64, seed: u64) -> Result<FuzzReport, HarnessError> {
    let mut opts = base.clone();
    opts.users = vec![
        UserSpec::member("alice", 1000),
        UserSpec::outsider("mallory", 666),
        UserSpec::member("carol", 3000),
    ];
    let stack = Stack::boot(opts)?;
    stack.revoke("carol", false)?;
    let alice = stack.user("alice").clone();
    let mut fz = Fuzzer {
        stack: &stack,
        rng: ChaCha8Rng::seed_from_u64(seed),
        alice: alice.identity(),
        alice_key: alice.key.clone(),
        mallory: stack.user("mallory").key.clone(),
        carol: stack.user("carol").key.clone(),
        history: BTreeMap::new(),
    };
    let writer = stack.writer();
    let setup_examined = stack.audit.examined();
    let mut report = FuzzReport::default();
    for _ in 0..count {
        let mut req = fz.valid();
        let k = if fz.rng.gen_bool(0.15) { 0 } else { fz.rng.gen_range(1..=3) };
        for _ in 0..k {
            let m = *MUTATIONS.choose(&mut fz.rng).unwrap();
            *report.mutations.entry(m).or_default() += 1;
            fz.mutate(&mut req, m);
        }
        report.sent += 1;
        match writer.put(&req.encode()) {
            Ok(r) => {
                report.admitted += 1;
                if req.capsule_id == stack.inode_capsule {
                    fz.history.entry(req.claimed_inode).or_default().push(r.digest);
                }
            }
            Err(PutError::Rejected(r)) => *report.rejected.entry(r.kind.name().to_string()).or_default() += 1,
            Err(e) => return Err(e.into()),
        }
    }
    report.audit_examined = stack.audit.examined() - setup_examined;
    report.violations = stack.audit.violations();
    Ok(report)
}

// SPDX-License-Identifier: Apache-2.0

//! Writer-side view of one capsule: the chain head and a mirror of the
//! server's Merkle tree, so that each append can carry a root signed with
//! the capsule write key.

use std::time::Duration;

use crate::block::{seal_block, CfsBlock, OuterBlock};
use crate::codec::Canonical;
use crate::crypto::{CapsuleWriteKey, Digest};
use crate::merkle::{MerkleTree, SignedRoot};
use crate::service::{AppendReceipt, CapsuleError, CapsuleService};

/// A sealed block and the root it produces, ready to append.
#[derive(Clone, Debug)]
pub struct PreparedAppend {
    pub digest: Digest,
    pub prev_hash: Digest,
    pub sealed: Vec<u8>,
    pub root: SignedRoot,
}

pub struct CapsuleWriter {
    key: CapsuleWriteKey,
    capsule_id: Digest,
    tree: MerkleTree,
    head: Digest,
}

impl CapsuleWriter {
    pub fn new(key: CapsuleWriteKey, capsule_id: Digest) -> Self {
        Self {
            key,
            capsule_id,
            tree: MerkleTree::new(),
            head: Digest::GENESIS,
        }
    }

    pub fn capsule_id(&self) -> Digest {
        self.capsule_id
    }

    pub fn key(&self) -> &CapsuleWriteKey {
        &self.key
    }

    pub fn len(&self) -> u64 {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn head(&self) -> Digest {
        self.head
    }

    /// Catch up with blocks the server holds beyond our mirror.
    pub fn sync_from(&mut self, server: &dyn CapsuleService) -> Result<(), CapsuleError> {
        let len = server.len(&self.capsule_id)?;
        if len <= self.tree.len() {
            return Ok(());
        }
        let mut sub = server.subscribe(&self.capsule_id, self.tree.len())?;
        while self.tree.len() < len {
            match sub.next_timeout(Duration::from_secs(5))? {
                Some((_, d)) => {
                    self.tree.push(&d);
                    self.head = d;
                }
                None => return Err(CapsuleError::Transport("subscription stalled".into())),
            }
        }
        Ok(())
    }

    /// Seal `inner` chained onto the current head (or `prev_override`).
    pub fn prepare(
        &self,
        inner: CfsBlock,
        timestamp: u64,
        prev_override: Option<Digest>,
    ) -> PreparedAppend {
        let prev_hash = prev_override.unwrap_or(self.head);
        let outer = OuterBlock {
            capsule_id: self.capsule_id,
            prev_hash,
            timestamp,
            inner,
        };
        let sealed = seal_block(&self.key, &outer);
        let root = SignedRoot::sign(
            &self.key,
            self.capsule_id,
            self.tree.len() + 1,
            self.tree.root_with(&sealed.digest),
        );
        PreparedAppend {
            digest: sealed.digest,
            prev_hash,
            sealed: sealed.encode(),
            root,
        }
    }

    pub fn commit(&mut self, prepared: &PreparedAppend) {
        self.tree.push(&prepared.digest);
        self.head = prepared.digest;
    }

    /// Prepare, append and commit in one step.
    pub fn append(
        &mut self,
        server: &dyn CapsuleService,
        inner: CfsBlock,
        timestamp: u64,
    ) -> Result<AppendReceipt, CapsuleError> {
        let p = self.prepare(inner, timestamp, None);
        let receipt = server.append(&self.capsule_id, &p.sealed, &p.root)?;
        self.commit(&p);
        Ok(receipt)
    }
}

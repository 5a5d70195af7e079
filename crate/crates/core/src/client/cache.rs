// SPDX-License-Identifier: Apache-2.0

//! The client's verified picture of the inode capsule.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::Duration;

use log::warn;

use crate::block::{BlockBody, InodeBlock};
use crate::crypto::{CapsuleReadKey, Digest};
use crate::fetch::{fetch_verified, FetchError};
use crate::service::{CapsuleError, CapsuleService, Subscription};
use crate::view::InodeView;

/// Verified inode versions, and the current winner per inode.
#[derive(Clone, Debug, Default)]
pub struct InodeCache {
    pub(crate) by_digest: HashMap<Digest, (u64, InodeBlock)>,
    pub(crate) view: InodeView,
    /// Blocks refused during ingest, by reason.
    pub(crate) rejected: BTreeMap<&'static str, u64>,
    /// Capsule sequence up to which blocks have been examined.
    pub(crate) cursor: u64,
    examined: HashSet<Digest>,
}

impl InodeCache {
    pub fn new(snapshot_ts: Option<u64>) -> Self {
        Self {
            view: snapshot_ts.map_or_else(InodeView::new, InodeView::bounded),
            ..Self::default()
        }
    }

    pub fn view(&self) -> &InodeView {
        &self.view
    }

    pub fn snapshot_ts(&self) -> Option<u64> {
        self.view.bound()
    }

    pub fn version(&self, digest: &Digest) -> Option<&(u64, InodeBlock)> {
        self.by_digest.get(digest)
    }

    pub fn rejected(&self) -> &BTreeMap<&'static str, u64> {
        &self.rejected
    }

    pub fn rejected_total(&self) -> u64 {
        self.rejected.values().sum()
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Offer one verified block.
    pub fn ingest(&mut self, digest: Digest, timestamp: u64, block: InodeBlock) {
        self.examined.insert(digest);
        self.by_digest.insert(digest, (timestamp, block.clone()));
        self.view.offer(digest, timestamp, block);
    }

    fn note_rejected(&mut self, digest: Digest, reason: &'static str) {
        if self.examined.insert(digest) {
            *self.rejected.entry(reason).or_default() += 1;
        }
    }

    /// Fetch, verify and ingest `digest`. Transport failures propagate;
    /// verification failures are counted and the block is skipped.
    pub(crate) fn fetch_and_ingest(
        &mut self,
        server: &dyn CapsuleService,
        capsule: &Digest,
        digest: &Digest,
        key: &CapsuleReadKey,
    ) -> Result<(), CapsuleError> {
        if self.examined.contains(digest) {
            return Ok(());
        }
        match fetch_verified(server, capsule, digest, key) {
            Ok(opened) => match opened.outer.inner.body {
                BlockBody::Inode(b) => self.ingest(*digest, opened.outer.timestamp, b),
                BlockBody::Data(_) => self.note_rejected(*digest, "wrong-kind"),
            },
            Err(FetchError::Server(e)) if e.is_transport() => return Err(e),
            Err(e) => {
                warn!("excluding inode block {}: {e}", digest.short());
                self.note_rejected(*digest, e.reason());
            }
        }
        Ok(())
    }

    /// Examine every block from the cursor to the capsule's current length.
    pub(crate) fn catch_up(
        &mut self,
        server: &dyn CapsuleService,
        capsule: &Digest,
        key: &CapsuleReadKey,
        sub: &mut dyn Subscription,
        until: u64,
    ) -> Result<usize, CapsuleError> {
        let mut n = 0;
        while self.cursor < until {
            let Some((seq, digest)) = sub.next_timeout(Duration::from_secs(5))? else {
                return Err(CapsuleError::Transport("inode subscription stalled".into()));
            };
            if seq < self.cursor {
                continue;
            }
            self.fetch_and_ingest(server, capsule, &digest, key)?;
            self.cursor = seq + 1;
            n += 1;
        }
        Ok(n)
    }
}

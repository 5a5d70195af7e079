// SPDX-License-Identifier: Apache-2.0

//! Current-version resolution over inode blocks.
//!
//! Both the middleware's ACL view and the client's inode cache are built by
//! offering every verified inode block to an [`InodeView`]; the winner per
//! inode is the greatest [`VersionKey`].

use std::collections::{BTreeSet, HashMap};

use crate::block::{InodeBlock, InodeNumber, VersionKey, ROOT_INODE};
use crate::crypto::Digest;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VersionEntry {
    pub key: VersionKey,
    pub block: InodeBlock,
}

impl VersionEntry {
    pub fn digest(&self) -> Digest {
        self.key.digest
    }

    pub fn timestamp(&self) -> u64 {
        self.key.timestamp
    }
}

#[derive(Clone, Debug, Default)]
pub struct InodeView {
    current: HashMap<InodeNumber, VersionEntry>,
    children: HashMap<InodeNumber, BTreeSet<(String, InodeNumber)>>,
    bound: Option<u64>,
}

impl InodeView {
    pub fn new() -> Self {
        Self::default()
    }

    /// A view that ignores versions stamped after `ts`.
    pub fn bounded(ts: u64) -> Self {
        Self {
            bound: Some(ts),
            ..Self::default()
        }
    }

    pub fn bound(&self) -> Option<u64> {
        self.bound
    }

    /// Returns true if the block became the current version. The genesis
    /// root (no predecessor) is visible under any bound.
    pub fn offer(&mut self, digest: Digest, timestamp: u64, block: InodeBlock) -> bool {
        let genesis = block.inode_number == ROOT_INODE && block.version_of.is_none();
        if !genesis && self.bound.is_some_and(|b| timestamp > b) {
            return false;
        }
        let key = VersionKey { timestamp, digest };
        let n = block.inode_number;
        if let Some(old) = self.current.get(&n) {
            if old.key >= key {
                return false;
            }
            if !old.block.deleted {
                let entry = (old.block.name.clone(), n);
                if let Some(set) = self.children.get_mut(&old.block.parent_inode) {
                    set.remove(&entry);
                }
            }
        }
        if !block.deleted {
            self.children
                .entry(block.parent_inode)
                .or_default()
                .insert((block.name.clone(), n));
        }
        self.current.insert(n, VersionEntry { key, block });
        true
    }

    pub fn get(&self, inode: InodeNumber) -> Option<&VersionEntry> {
        self.current.get(&inode)
    }

    /// Current version, unless it is a tombstone.
    pub fn live(&self, inode: InodeNumber) -> Option<&VersionEntry> {
        self.current.get(&inode).filter(|e| !e.block.deleted)
    }

    pub fn digest_of(&self, inode: InodeNumber) -> Option<Digest> {
        self.current.get(&inode).map(|e| e.key.digest)
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn inodes(&self) -> impl Iterator<Item = &VersionEntry> {
        self.current.values()
    }

    /// `(name, inode)` pairs under `parent`, sorted by name.
    pub fn children(&self, parent: InodeNumber) -> Vec<(String, InodeNumber)> {
        self.children
            .get(&parent)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Duplicate names (concurrent creates) resolve to the lowest inode.
    pub fn child(&self, parent: InodeNumber, name: &str) -> Option<InodeNumber> {
        let set = self.children.get(&parent)?;
        set.range((name.to_owned(), 0)..)
            .next()
            .filter(|(n, _)| n == name)
            .map(|(_, i)| *i)
    }

    /// Inode → current digest, for convergence checks.
    pub fn digests(&self) -> HashMap<InodeNumber, Digest> {
        self.current
            .iter()
            .map(|(n, e)| (*n, e.key.digest))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::block::{Acl, Identity, InodeKind};
    use crate::crypto::{KeyPair, Scheme};

    fn block(n: InodeNumber, parent: InodeNumber, name: &str, deleted: bool) -> InodeBlock {
        let who = Identity::new(*KeyPair::from_seed(Scheme::Null, [1; 32]).public(), 7);
        InodeBlock {
            inode_number: n,
            parent_inode: parent,
            name: name.into(),
            kind: InodeKind::File,
            deleted,
            size: 0,
            data_hashes: vec![],
            acl: Acl::new([who]),
            updated_by: who,
            version_of: None,
        }
    }

    #[test]
    fn later_timestamp_wins() {
        let mut v = InodeView::new();
        assert!(v.offer(Digest([1; 32]), 20, block(7, 1, "b", false)));
        assert!(!v.offer(Digest([2; 32]), 10, block(7, 1, "a", false)));
        assert_eq!(v.get(7).unwrap().timestamp(), 20);
        assert_eq!(v.children(1), vec![("b".into(), 7)]);
    }

    #[test]
    fn tie_goes_to_greater_digest() {
        let mut v = InodeView::new();
        v.offer(Digest([9; 32]), 10, block(7, 1, "a", false));
        v.offer(Digest([3; 32]), 10, block(7, 1, "b", false));
        assert_eq!(v.digest_of(7), Some(Digest([9; 32])));
    }

    #[test]
    fn tombstone_leaves_children() {
        let mut v = InodeView::new();
        v.offer(Digest([1; 32]), 1, block(5, ROOT_INODE, "f", false));
        assert_eq!(v.child(ROOT_INODE, "f"), Some(5));
        v.offer(Digest([2; 32]), 2, block(5, ROOT_INODE, "f", true));
        assert_eq!(v.child(ROOT_INODE, "f"), None);
        assert!(v.live(5).is_none());
        assert!(v.get(5).is_some());
    }

    #[test]
    fn rename_moves_child_entry() {
        let mut v = InodeView::new();
        v.offer(Digest([1; 32]), 1, block(5, 1, "old", false));
        v.offer(Digest([2; 32]), 2, block(5, 9, "new", false));
        assert!(v.children(1).is_empty());
        assert_eq!(v.child(9, "new"), Some(5));
    }

    #[test]
    fn duplicate_names_pick_lowest_inode() {
        let mut v = InodeView::new();
        v.offer(Digest([1; 32]), 1, block(50, 1, "x", false));
        v.offer(Digest([2; 32]), 2, block(40, 1, "x", false));
        v.offer(Digest([3; 32]), 3, block(45, 1, "xy", false));
        assert_eq!(v.child(1, "x"), Some(40));
        assert_eq!(v.child(1, "xy"), Some(45));
        assert_eq!(v.child(1, "w"), None);
    }

    #[test]
    fn bound_hides_later_versions() {
        let mut v = InodeView::bounded(7);
        v.offer(Digest([1; 32]), 5, block(3, 1, "a", false));
        v.offer(Digest([2; 32]), 9, block(3, 1, "a2", false));
        assert_eq!(v.get(3).unwrap().timestamp(), 5);
    }

    /// Any delivery order converges to the per-inode maximum, and the
    /// children map equals the one derived from the winners.
    #[test]
    fn arrival_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut versions = Vec::new();
            for i in 0..80u8 {
                let n = rng.gen_range(2..10);
                let ts = rng.gen_range(0..20);
                let parent = rng.gen_range(1..3);
                let name = format!("f{}", rng.gen_range(0..3));
                let mut d = [0u8; 32];
                rng.fill(&mut d);
                d[0] = i;
                versions.push((Digest(d), ts, block(n, parent, &name, rng.gen_bool(0.2))));
            }
            let mut oracle: HashMap<InodeNumber, (VersionKey, InodeBlock)> = HashMap::new();
            for (d, ts, b) in &versions {
                let key = VersionKey { timestamp: *ts, digest: *d };
                let e = oracle.entry(b.inode_number).or_insert((key, b.clone()));
                if key > e.0 {
                    *e = (key, b.clone());
                }
            }
            let mut expected_children: HashMap<InodeNumber, BTreeSet<(String, InodeNumber)>> =
                HashMap::new();
            for (n, (_, b)) in &oracle {
                if !b.deleted {
                    expected_children
                        .entry(b.parent_inode)
                        .or_default()
                        .insert((b.name.clone(), *n));
                }
            }
            for _ in 0..3 {
                versions.shuffle(&mut rng);
                let mut v = InodeView::new();
                for (d, ts, b) in &versions {
                    v.offer(*d, *ts, b.clone());
                }
                let want: HashMap<_, _> = oracle.iter().map(|(n, (k, _))| (*n, k.digest)).collect();
                assert_eq!(v.digests(), want);
                for parent in 1..3 {
                    let got: BTreeSet<_> = v.children(parent).into_iter().collect();
                    assert_eq!(got, expected_children.get(&parent).cloned().unwrap_or_default());
                }
            }
        }
    }
}

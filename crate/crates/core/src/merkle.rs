// SPDX-License-Identifier: Apache-2.0

//! Binary Merkle tree over block digests in append order.
//!
//! Leaves are `H(0x00 || digest)`, interior nodes `H(0x01 || left || right)`.
//! A level with an odd number of nodes pairs its last node with itself.
//! Appends update only the right edge, so both appends and proofs are
//! O(log n); historical roots are recomputed from the leaf prefix.

use crate::codec::{tag, Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{self, hash_parts, CapsuleWriteKey, Digest, PublicKey, Signature};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Side {
    Left,
    Right,
}

fn leaf_node(d: &Digest) -> Digest {
    hash_parts(&[&[0x00], d.as_bytes()])
}

fn interior(left: &Digest, right: &Digest) -> Digest {
    hash_parts(&[&[0x01], left.as_bytes(), right.as_bytes()])
}

/// Number of sibling hashes in a proof for a tree of `size` leaves.
pub fn depth(size: u64) -> usize {
    let mut d = 0;
    let mut n = size;
    while n > 1 {
        n = n.div_ceil(2);
        d += 1;
    }
    d
}

#[derive(Clone, Debug, Default)]
pub struct MerkleTree {
    levels: Vec<Vec<Digest>>,
}

impl MerkleTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_digests<'a>(digests: impl IntoIterator<Item = &'a Digest>) -> Self {
        let mut t = Self::new();
        for d in digests {
            t.push(d);
        }
        t
    }

    pub fn len(&self) -> u64 {
        self.levels.first().map_or(0, |l| l.len() as u64)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, digest: &Digest) {
        if self.levels.is_empty() {
            self.levels.push(Vec::new());
        }
        self.levels[0].push(leaf_node(digest));
        let mut idx = self.levels[0].len() - 1;
        let mut k = 0;
        while self.levels[k].len() > 1 {
            let j = idx / 2;
            let left = self.levels[k][2 * j];
            let right = *self.levels[k].get(2 * j + 1).unwrap_or(&left);
            let node = interior(&left, &right);
            if self.levels.len() == k + 1 {
                self.levels.push(Vec::new());
            }
            let up = &mut self.levels[k + 1];
            if j == up.len() {
                up.push(node);
            } else {
                up[j] = node;
            }
            idx = j;
            k += 1;
        }
    }

    /// Root the tree would have after `push(extra)`, without mutating it.
    pub fn root_with(&self, extra: &Digest) -> Digest {
        let mut node = leaf_node(extra);
        let mut idx = self.len() as usize;
        let mut level_len = idx + 1;
        let mut k = 0;
        while level_len > 1 {
            // `idx` is always the last node of its level, so its left
            // sibling (if any) is already final.
            node = if idx % 2 == 0 {
                interior(&node, &node)
            } else {
                interior(&self.levels[k][idx - 1], &node)
            };
            idx /= 2;
            level_len = level_len.div_ceil(2);
            k += 1;
        }
        node
    }

    pub fn root(&self) -> Option<Digest> {
        let top = self.depth_now();
        self.levels.get(top).and_then(|l| l.first().copied())
    }

    fn depth_now(&self) -> usize {
        depth(self.len())
    }

    /// Sibling path for the leaf at `index` in the current tree.
    pub fn path(&self, index: u64) -> Option<Vec<(Digest, Side)>> {
        if index >= self.len() {
            return None;
        }
        let mut out = Vec::with_capacity(self.depth_now());
        let mut j = index as usize;
        for k in 0..self.depth_now() {
            let level = &self.levels[k];
            let (sib, side) = if j % 2 == 0 {
                (*level.get(j + 1).unwrap_or(&level[j]), Side::Right)
            } else {
                (level[j - 1], Side::Left)
            };
            out.push((sib, side));
            j /= 2;
        }
        Some(out)
    }
}

/// Recompute the root from a leaf digest and its sibling path.
pub fn fold(leaf_digest: &Digest, path: &[(Digest, Side)]) -> Digest {
    path.iter().fold(leaf_node(leaf_digest), |acc, (sib, side)| match side {
        Side::Right => interior(&acc, sib),
        Side::Left => interior(sib, &acc),
    })
}

/// A tree root signed with the capsule write key.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SignedRoot {
    pub capsule_id: Digest,
    pub tree_size: u64,
    pub root: Digest,
    pub signature: Signature,
}

impl SignedRoot {
    fn payload(capsule_id: &Digest, tree_size: u64, root: &Digest) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u8(tag::ROOT_PAYLOAD)
            .value(capsule_id)
            .u64(tree_size)
            .value(root);
        enc.finish()
    }

    pub fn sign(key: &CapsuleWriteKey, capsule_id: Digest, tree_size: u64, root: Digest) -> Self {
        let signature = key.sign(&Self::payload(&capsule_id, tree_size, &root));
        Self {
            capsule_id,
            tree_size,
            root,
            signature,
        }
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        crypto::verify(
            key,
            &Self::payload(&self.capsule_id, self.tree_size, &self.root),
            &self.signature,
        )
    }
}

impl Canonical for SignedRoot {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(tag::SIGNED_ROOT)
            .value(&self.capsule_id)
            .u64(self.tree_size)
            .value(&self.root)
            .value(&self.signature);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.expect_tag(tag::SIGNED_ROOT, "SignedRoot")?;
        Ok(Self {
            capsule_id: dec.value()?,
            tree_size: dec.u64()?,
            root: dec.value()?,
            signature: dec.value()?,
        })
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MerkleProof {
    pub leaf_digest: Digest,
    pub leaf_index: u64,
    pub path: Vec<(Digest, Side)>,
    pub root: SignedRoot,
}

impl Canonical for MerkleProof {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(tag::MERKLE_PROOF)
            .value(&self.leaf_digest)
            .u64(self.leaf_index)
            .list(&self.path, |e, (d, side)| {
                e.value(d).u8(matches!(side, Side::Right) as u8);
            })
            .value(&self.root);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.expect_tag(tag::MERKLE_PROOF, "MerkleProof")?;
        Ok(Self {
            leaf_digest: dec.value()?,
            leaf_index: dec.u64()?,
            path: dec.list(|d| {
                let digest = d.value()?;
                let side = match d.u8()? {
                    0 => Side::Left,
                    1 => Side::Right,
                    _ => return Err(CodecError::Invalid("bad proof side")),
                };
                Ok((digest, side))
            })?,
            root: dec.value()?,
        })
    }
}

/// True iff the proof places `leaf_digest` at `leaf_index` under a root
/// signed by `trusted_root_key`.
pub fn verify_proof(leaf_digest: &Digest, proof: &MerkleProof, trusted_root_key: &PublicKey) -> bool {
    if &proof.leaf_digest != leaf_digest || proof.leaf_index >= proof.root.tree_size {
        return false;
    }
    if proof.path.len() != depth(proof.root.tree_size) {
        return false;
    }
    // Sides must agree with the claimed position.
    let positional = proof.path.iter().enumerate().all(|(k, (_, side))| {
        let bit = (proof.leaf_index >> k) & 1;
        matches!((bit, side), (0, Side::Right) | (1, Side::Left))
    });
    positional
        && fold(leaf_digest, &proof.path) == proof.root.root
        && proof.root.verify(trusted_root_key)
}

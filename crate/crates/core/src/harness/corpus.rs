// SPDX-License-Identifier: Apache-2.0

//! Seeded block corpus for cross-process codec checks. One process writes
//! the corpus; another regenerates it from the same seed and compares
//! bytes, then verifies every signature the first process produced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{
    build_cfs_block, verify_cfs_block, Acl, BlockBody, CfsBlock, DataBlock, Identity, InodeBlock, InodeKind,
};
use crate::codec::Canonical;
use crate::crypto::{hash, Digest, KeyPair, Scheme};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub index: usize,
    /// Canonical encoding, hex.
    pub block: String,
    pub digest: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CorpusCheck {
    pub entries: usize,
    pub byte_mismatches: Vec<usize>,
    pub bad_signatures: Vec<usize>,
}

impl CorpusCheck {
    pub fn pass(&self) -> bool {
        self.byte_mismatches.is_empty() && self.bad_signatures.is_empty()
    }
}

fn random_block(rng: &mut ChaCha8Rng, keys: &[KeyPair]) -> CfsBlock {
    let signer = &keys[rng.gen_range(0..keys.len())];
    let author = Identity::new(*signer.public(), rng.gen_range(0..70_000));
    let body = if rng.gen_bool(0.5) {
        let len = rng.gen_range(0..=512);
        BlockBody::Data(DataBlock {
            payload: (0..len).map(|_| rng.gen()).collect(),
        })
    } else {
        let acl = Acl::new((0..rng.gen_range(0..4)).map(|_| {
            Identity::new(*keys[rng.gen_range(0..keys.len())].public(), rng.gen_range(0..70_000))
        }));
        let name_len = rng.gen_range(1..24);
        BlockBody::Inode(InodeBlock {
            inode_number: rng.gen(),
            parent_inode: rng.gen(),
            name: (0..name_len).map(|_| rng.gen_range('a'..='z')).collect(),
            kind: if rng.gen_bool(0.3) { InodeKind::Directory } else { InodeKind::File },
            deleted: rng.gen_bool(0.1),
            size: rng.gen_range(0..1 << 30),
            data_hashes: (0..rng.gen_range(0..6)).map(|_| Digest(rng.gen())).collect(),
            acl,
            updated_by: author,
            version_of: rng.gen_bool(0.7).then(|| Digest(rng.gen())),
        })
    };
    build_cfs_block(body, author, signer).expect("author key matches signer")
}

pub fn generate(seed: u64, count: usize) -> Vec<CorpusEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<KeyPair> = (0..8).map(|_| KeyPair::from_seed(Scheme::Ed25519, rng.gen())).collect();
    (0..count)
        .map(|index| {
            let bytes = random_block(&mut rng, &keys).encode();
            CorpusEntry {
                index,
                digest: hash(&bytes).to_hex(),
                block: hex::encode(bytes),
            }
        })
        .collect()
}

/// Regenerate from `seed` and compare with `theirs`; verify their signatures.
pub fn check(seed: u64, theirs: &[CorpusEntry]) -> CorpusCheck {
    let ours = generate(seed, theirs.len());
    let mut out = CorpusCheck {
        entries: theirs.len(),
        ..CorpusCheck::default()
    };
    for (mine, e) in ours.iter().zip(theirs) {
        if mine.block != e.block || mine.digest != e.digest {
            out.byte_mismatches.push(e.index);
        }
        let ok = hex::decode(&e.block)
            .ok()
            .and_then(|b| CfsBlock::decode(&b).ok().map(|blk| (b, blk)))
            .is_some_and(|(b, blk)| verify_cfs_block(&blk) && blk.encode() == b);
        if !ok {
            out.bad_signatures.push(e.index);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_matches_and_tampering_is_caught() {
        let mut c = generate(9, 40);
        assert!(check(9, &c).pass());
        assert!(!check(10, &c).byte_mismatches.is_empty());
        let mut bytes = hex::decode(&c[3].block).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        c[3].block = hex::encode(bytes);
        let r = check(9, &c);
        assert_eq!(r.byte_mismatches, vec![3]);
        assert_eq!(r.bad_signatures, vec![3]);
    }
}

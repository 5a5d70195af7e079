// SPDX-License-Identifier: Apache-2.0

//! Block layers, from the inside out:
//!
//! 1. [`InodeBlock`] / [`DataBlock`]: filesystem content.
//! 2. [`CfsBlock`]: a body plus its author, signed (not encrypted) by the client.
//! 3. [`OuterBlock`]: chained by `prev_hash` and timestamped by the middleware.
//!    Its digest is the block's identity everywhere in the system.
//! 4. [`SealedBlock`]: the outer block signed, then encrypted under the capsule
//!    secret, with a cleartext header the storage server can admit without
//!    being able to read the content.

use std::fmt;

use thiserror::Error;

use crate::codec::{tag, Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{
    self, decrypt_outer, encrypt_outer, hash, CapsuleReadKey, CapsuleWriteKey, Digest, KeyPair,
    PublicKey, Signature,
};

pub type InodeNumber = u64;
pub type Uid = u32;

pub const ROOT_INODE: InodeNumber = 1;
/// `parent_inode` of the root directory.
pub const NO_PARENT: InodeNumber = 0;
pub const DEFAULT_BLOCK_SIZE: usize = 512;
pub const DEFAULT_NOBODY_UID: Uid = 65534;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BlockError {
    #[error("signing key does not match the claimed author")]
    IdentityMismatch,
    #[error("ACLs can only be inherited from a directory")]
    InvalidParent,
    #[error("invalid block: {0}")]
    Invalid(String),
}

/// A user across clients: the client's public key plus the OS uid.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Identity {
    pub key: PublicKey,
    pub uid: Uid,
}

impl Identity {
    pub fn new(key: PublicKey, uid: Uid) -> Self {
        Self { key, uid }
    }
}

impl Canonical for Identity {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.value(&self.key).u32(self.uid);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            key: dec.value()?,
            uid: dec.u32()?,
        })
    }
}

pub type AclEntry = Identity;

/// Write-access list, kept deduplicated and sorted by (key id, uid) so that
/// its encoding is independent of insertion order.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default)]
pub struct Acl(Vec<AclEntry>);

impl Acl {
    pub fn new(entries: impl IntoIterator<Item = AclEntry>) -> Self {
        let mut v: Vec<AclEntry> = entries.into_iter().collect();
        v.sort_by_cached_key(|e| (e.key.key_id(), e.uid));
        v.dedup();
        Acl(v)
    }

    pub fn entries(&self) -> &[AclEntry] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, who: &Identity) -> bool {
        self.0.iter().any(|e| e == who)
    }

    pub fn mentions_key(&self, key_id: &Digest) -> bool {
        self.0.iter().any(|e| &e.key.key_id() == key_id)
    }

    pub fn with(&self, who: Identity) -> Self {
        Acl::new(self.0.iter().copied().chain([who]))
    }

    pub fn without(&self, who: &Identity) -> Self {
        Acl::new(self.0.iter().copied().filter(|e| e != who))
    }

    pub fn without_key(&self, key_id: &Digest) -> Self {
        Acl::new(self.0.iter().copied().filter(|e| &e.key.key_id() != key_id))
    }
}

impl Canonical for Acl {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.list(&self.0, |e, entry| {
            entry.encode_into(e);
        });
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let entries: Vec<AclEntry> = dec.list(|d| d.value())?;
        let acl = Acl::new(entries.iter().copied());
        if acl.0 != entries {
            return Err(CodecError::Invalid("ACL is not in canonical order"));
        }
        Ok(acl)
    }
}

pub fn acl_permits(acl: &Acl, who: &Identity) -> bool {
    acl.contains(who)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum InodeKind {
    File,
    Directory,
}

impl InodeKind {
    fn code(self) -> u8 {
        match self {
            InodeKind::File => 0,
            InodeKind::Directory => 1,
        }
    }
}

/// One version of an inode's metadata.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct InodeBlock {
    pub inode_number: InodeNumber,
    pub parent_inode: InodeNumber,
    pub name: String,
    pub kind: InodeKind,
    /// Tombstone marker; capsules cannot remove records.
    pub deleted: bool,
    pub size: u64,
    pub data_hashes: Vec<Digest>,
    pub acl: Acl,
    pub updated_by: Identity,
    /// Digest of the version this one replaces.
    pub version_of: Option<Digest>,
}

impl InodeBlock {
    pub fn is_dir(&self) -> bool {
        self.kind == InodeKind::Directory
    }

    /// Structural invariants that hold for every version ever committed.
    pub fn validate(&self, block_size: usize) -> Result<(), BlockError> {
        let bad = |m: &str| Err(BlockError::Invalid(m.to_owned()));
        if self.inode_number == NO_PARENT {
            return bad("inode number 0 is reserved");
        }
        if self.acl.is_empty() {
            return bad("ACL must not be empty");
        }
        if self.inode_number == ROOT_INODE {
            if self.parent_inode != NO_PARENT || !self.is_dir() {
                return bad("root must be a parentless directory");
            }
        } else if self.name.is_empty() || self.name.contains('/') || self.name == "." || self.name == ".." {
            return bad("invalid file name");
        }
        match self.kind {
            InodeKind::Directory => {
                if !self.data_hashes.is_empty() || self.size != 0 {
                    return bad("directories carry no data");
                }
            }
            InodeKind::File => {
                let n = self.data_hashes.len() as u64;
                let bs = block_size as u64;
                let ok = if n == 0 {
                    self.size == 0
                } else {
                    self.size <= n * bs && self.size > (n - 1) * bs
                };
                if !ok {
                    return bad("file size inconsistent with its data blocks");
                }
            }
        }
        Ok(())
    }
}

impl Canonical for InodeBlock {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(tag::INODE_BLOCK)
            .u64(self.inode_number)
            .u64(self.parent_inode)
            .str(&self.name)
            .u8(self.kind.code())
            .bool(self.deleted)
            .u64(self.size)
            .list(&self.data_hashes, |e, d| {
                e.value(d);
            })
            .value(&self.acl)
            .value(&self.updated_by)
            .option(self.version_of.as_ref(), |e, d| {
                e.value(d);
            });
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.expect_tag(tag::INODE_BLOCK, "InodeBlock")?;
        Ok(Self {
            inode_number: dec.u64()?,
            parent_inode: dec.u64()?,
            name: dec.string()?,
            kind: match dec.u8()? {
                0 => InodeKind::File,
                1 => InodeKind::Directory,
                _ => return Err(CodecError::Invalid("unknown inode kind")),
            },
            deleted: dec.bool()?,
            size: dec.u64()?,
            data_hashes: dec.list(|d| d.value())?,
            acl: dec.value()?,
            updated_by: dec.value()?,
            version_of: dec.option(|d| d.value())?,
        })
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct DataBlock {
    pub payload: Vec<u8>,
}

impl fmt::Debug for DataBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DataBlock({} bytes)", self.payload.len())
    }
}

impl Canonical for DataBlock {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(tag::DATA_BLOCK).bytes(&self.payload);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.expect_tag(tag::DATA_BLOCK, "DataBlock")?;
        Ok(Self {
            payload: dec.bytes()?.to_vec(),
        })
    }
}

/// Split `content` into fixed-size blocks; only the last may be short.
pub fn make_data_blocks(content: &[u8], block_size: usize) -> Vec<DataBlock> {
    assert!(block_size > 0, "block size must be positive");
    content
        .chunks(block_size)
        .map(|c| DataBlock { payload: c.to_vec() })
        .collect()
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum BlockBody {
    Inode(InodeBlock),
    Data(DataBlock),
}

impl BlockBody {
    pub fn as_inode(&self) -> Option<&InodeBlock> {
        match self {
            BlockBody::Inode(i) => Some(i),
            BlockBody::Data(_) => None,
        }
    }

    pub fn as_data(&self) -> Option<&DataBlock> {
        match self {
            BlockBody::Data(d) => Some(d),
            BlockBody::Inode(_) => None,
        }
    }
}

impl Canonical for BlockBody {
    fn encode_into(&self, enc: &mut Encoder) {
        match self {
            BlockBody::Inode(i) => i.encode_into(enc),
            BlockBody::Data(d) => d.encode_into(enc),
        }
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        // Peek at the tag without consuming it.
        match dec.clone().u8()? {
            tag::INODE_BLOCK => Ok(BlockBody::Inode(dec.value()?)),
            tag::DATA_BLOCK => Ok(BlockBody::Data(dec.value()?)),
            got => Err(CodecError::BadTag {
                what: "BlockBody",
                got,
            }),
        }
    }
}

/// Client-signed filesystem block.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CfsBlock {
    pub body: BlockBody,
    pub author: Identity,
    pub client_signature: Signature,
}

impl CfsBlock {
    /// Bytes covered by the client signature.
    pub fn signed_payload(body: &BlockBody, author: &Identity) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u8(tag::CFS_SIGNED_PAYLOAD).value(body).value(author);
        enc.finish()
    }
}

impl Canonical for CfsBlock {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(tag::CFS_BLOCK)
            .value(&self.body)
            .value(&self.author)
            .value(&self.client_signature);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.expect_tag(tag::CFS_BLOCK, "CfsBlock")?;
        Ok(Self {
            body: dec.value()?,
            author: dec.value()?,
            client_signature: dec.value()?,
        })
    }
}

pub fn build_cfs_block(
    body: BlockBody,
    author: Identity,
    signing_key: &KeyPair,
) -> Result<CfsBlock, BlockError> {
    if signing_key.public() != &author.key {
        return Err(BlockError::IdentityMismatch);
    }
    let client_signature = signing_key.sign(&CfsBlock::signed_payload(&body, &author));
    Ok(CfsBlock {
        body,
        author,
        client_signature,
    })
}

pub fn verify_cfs_block(block: &CfsBlock) -> bool {
    crypto::verify(
        &block.author.key,
        &CfsBlock::signed_payload(&block.body, &block.author),
        &block.client_signature,
    )
}

/// Fresh copy of a directory's ACL for a new child.
pub fn inherit_acl(parent: &InodeBlock) -> Result<Acl, BlockError> {
    if !parent.is_dir() {
        return Err(BlockError::InvalidParent);
    }
    Ok(parent.acl.clone())
}

/// The middleware's wrapper around a client block.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct OuterBlock {
    pub capsule_id: Digest,
    pub prev_hash: Digest,
    /// Microseconds since the epoch, assigned by the middleware.
    pub timestamp: u64,
    pub inner: CfsBlock,
}

impl Canonical for OuterBlock {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(tag::OUTER_BLOCK)
            .value(&self.capsule_id)
            .value(&self.prev_hash)
            .u64(self.timestamp)
            .value(&self.inner);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.expect_tag(tag::OUTER_BLOCK, "OuterBlock")?;
        Ok(Self {
            capsule_id: dec.value()?,
            prev_hash: dec.value()?,
            timestamp: dec.u64()?,
            inner: dec.value()?,
        })
    }
}

/// Stored and transmitted form of a capsule block.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SealedBlock {
    pub capsule_id: Digest,
    pub prev_hash: Digest,
    pub digest: Digest,
    pub ciphertext: Vec<u8>,
    pub seal: Signature,
}

impl SealedBlock {
    fn seal_payload(&self) -> Vec<u8> {
        let mut enc = Encoder::with_capacity(self.ciphertext.len() + 128);
        enc.u8(tag::SEAL_PAYLOAD)
            .value(&self.capsule_id)
            .value(&self.prev_hash)
            .value(&self.digest)
            .bytes(&self.ciphertext);
        enc.finish()
    }

    fn aad(capsule_id: &Digest, prev_hash: &Digest, digest: &Digest) -> [u8; 96] {
        let mut aad = [0u8; 96];
        aad[..32].copy_from_slice(capsule_id.as_bytes());
        aad[32..64].copy_from_slice(prev_hash.as_bytes());
        aad[64..].copy_from_slice(digest.as_bytes());
        aad
    }

    /// Admission check usable without the read key.
    pub fn verify_seal(&self, capsule_key: &PublicKey) -> bool {
        crypto::verify(capsule_key, &self.seal_payload(), &self.seal)
    }
}

impl Canonical for SealedBlock {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(tag::SEALED_BLOCK)
            .value(&self.capsule_id)
            .value(&self.prev_hash)
            .value(&self.digest)
            .bytes(&self.ciphertext)
            .value(&self.seal);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.expect_tag(tag::SEALED_BLOCK, "SealedBlock")?;
        Ok(Self {
            capsule_id: dec.value()?,
            prev_hash: dec.value()?,
            digest: dec.value()?,
            ciphertext: dec.bytes()?.to_vec(),
            seal: dec.value()?,
        })
    }
}

/// Sign the outer block, encrypt it, then seal the ciphertext header.
pub fn seal_block(key: &CapsuleWriteKey, outer: &OuterBlock) -> SealedBlock {
    let outer_bytes = outer.encode();
    let digest = hash(&outer_bytes);
    let middleware_signature = key.sign(&outer_bytes);
    let mut plain = Encoder::with_capacity(outer_bytes.len() + 128);
    plain
        .u8(tag::SIGNED_OUTER)
        .bytes(&outer_bytes)
        .value(&middleware_signature);
    let aad = SealedBlock::aad(&outer.capsule_id, &outer.prev_hash, &digest);
    let ciphertext = encrypt_outer(key, &aad, &plain.finish());
    let mut sealed = SealedBlock {
        capsule_id: outer.capsule_id,
        prev_hash: outer.prev_hash,
        digest,
        ciphertext,
        seal: Signature {
            signer_key_id: Digest::GENESIS,
            bytes: Vec::new(),
        },
    };
    sealed.seal = key.sign(&sealed.seal_payload());
    sealed
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OpenError {
    #[error("malformed block: {0}")]
    Decode(#[from] CodecError),
    #[error("outer decryption failed")]
    Decryption,
    #[error("middleware signature invalid")]
    MiddlewareSignature,
    #[error("block digest mismatch")]
    DigestMismatch,
    #[error("cleartext header disagrees with the encrypted block")]
    HeaderMismatch,
    #[error("client signature invalid")]
    ClientSignature,
}

/// A sealed block after successful decryption and verification.
#[derive(Clone, Debug)]
pub struct OpenedBlock {
    pub digest: Digest,
    pub outer: OuterBlock,
    /// Canonical plaintext of `outer`; `hash(outer_bytes) == digest`.
    pub outer_bytes: Vec<u8>,
}

/// Decrypt and fully verify a sealed block against the digest the caller
/// asked for.
pub fn open_block(
    key: &CapsuleReadKey,
    sealed_bytes: &[u8],
    expected: &Digest,
) -> Result<OpenedBlock, OpenError> {
    let sealed = SealedBlock::decode(sealed_bytes)?;
    if &sealed.digest != expected {
        return Err(OpenError::DigestMismatch);
    }
    let aad = SealedBlock::aad(&sealed.capsule_id, &sealed.prev_hash, &sealed.digest);
    let plain =
        decrypt_outer(key, &aad, &sealed.ciphertext).map_err(|_| OpenError::Decryption)?;
    let mut dec = Decoder::new(&plain);
    dec.expect_tag(tag::SIGNED_OUTER, "SignedOuter")?;
    let outer_bytes = dec.bytes()?.to_vec();
    let middleware_signature: Signature = dec.value()?;
    dec.finish()?;
    if !crypto::verify(key.verifying_key(), &outer_bytes, &middleware_signature) {
        return Err(OpenError::MiddlewareSignature);
    }
    if &hash(&outer_bytes) != expected {
        return Err(OpenError::DigestMismatch);
    }
    let outer = OuterBlock::decode(&outer_bytes)?;
    if outer.capsule_id != sealed.capsule_id || outer.prev_hash != sealed.prev_hash {
        return Err(OpenError::HeaderMismatch);
    }
    if !verify_cfs_block(&outer.inner) {
        return Err(OpenError::ClientSignature);
    }
    Ok(OpenedBlock {
        digest: *expected,
        outer,
        outer_bytes,
    })
}

/// Total order used to pick the current version of an inode: the highest
/// timestamp wins, ties go to the lexicographically greatest digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub struct VersionKey {
    pub timestamp: u64,
    pub digest: Digest,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Scheme;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kp(seed: u8) -> KeyPair {
        KeyPair::from_seed(Scheme::Ed25519, [seed; 32])
    }

    fn sample_inode(owner: &KeyPair) -> InodeBlock {
        let me = Identity::new(*owner.public(), 1000);
        InodeBlock {
            inode_number: 7,
            parent_inode: ROOT_INODE,
            name: "notes.txt".into(),
            kind: InodeKind::File,
            deleted: false,
            size: 700,
            data_hashes: vec![Digest([0xaa; 32]), Digest([0xbb; 32])],
            acl: Acl::new([me]),
            updated_by: me,
            version_of: None,
        }
    }

    #[test]
    fn inode_encoding_matches_hand_assembled_layout() {
        let owner = kp(3);
        let block = sample_inode(&owner);

        // Assembled by hand from the grammar, independently of Encoder.
        let pk = owner.public().as_bytes();
        let mut expected: Vec<u8> = vec![0x01];
        expected.extend_from_slice(&7u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&[9, 0, 0, 0]);
        expected.extend_from_slice(b"notes.txt");
        expected.push(0); // file
        expected.push(0); // not deleted
        expected.extend_from_slice(&700u64.to_le_bytes());
        expected.extend_from_slice(&[2, 0, 0, 0]);
        expected.extend_from_slice(&[0xaa; 32]);
        expected.extend_from_slice(&[0xbb; 32]);
        expected.extend_from_slice(&[1, 0, 0, 0]); // one ACL entry
        expected.push(1); // ed25519
        expected.extend_from_slice(pk);
        expected.extend_from_slice(&1000u32.to_le_bytes());
        expected.push(1); // updated_by
        expected.extend_from_slice(pk);
        expected.extend_from_slice(&1000u32.to_le_bytes());
        expected.push(0); // version_of absent

        let got = block.encode();
        assert_eq!(got.len(), 1 + 8 + 8 + 4 + 9 + 1 + 1 + 8 + 4 + 64 + 4 + 37 + 37 + 1);
        assert_eq!(got, expected);
        assert_eq!(InodeBlock::decode(&got).unwrap(), block);
    }

    #[test]
    fn encode_is_deterministic_and_sensitive() {
        let owner = kp(1);
        let cfs = build_cfs_block(
            BlockBody::Data(DataBlock { payload: b"x".to_vec() }),
            Identity::new(*owner.public(), 0),
            &owner,
        )
        .unwrap();
        let a = OuterBlock {
            capsule_id: Digest([1; 32]),
            prev_hash: Digest::GENESIS,
            timestamp: 10,
            inner: cfs.clone(),
        };
        let mut b = a.clone();
        assert_eq!(a.encode(), b.encode());
        b.timestamp = 11;
        assert_ne!(a.encode(), b.encode());
    }

    #[test]
    fn make_data_blocks_examples() {
        let blocks = make_data_blocks(&[7u8; 1024], 512);
        assert_eq!(blocks.len(), 2);
        assert!(blocks.iter().all(|b| b.payload.len() == 512));
        assert!(make_data_blocks(&[], 512).is_empty());
        let sizes: Vec<_> = make_data_blocks(&[1u8; 700], 512)
            .iter()
            .map(|b| b.payload.len())
            .collect();
        assert_eq!(sizes, vec![512, 188]);
    }

    #[test]
    fn make_data_blocks_reassembles_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let len = rng.gen_range(0..5000);
            let bs = rng.gen_range(1..1100);
            let mut content = vec![0u8; len];
            rng.fill(content.as_mut_slice());
            let blocks = make_data_blocks(&content, bs);
            let mut joined = Vec::new();
            for (i, b) in blocks.iter().enumerate() {
                if i + 1 < blocks.len() {
                    assert_eq!(b.payload.len(), bs);
                }
                joined.extend_from_slice(&b.payload);
            }
            assert_eq!(joined, content);
        }
    }

    #[test]
    fn cfs_block_signature_binding() {
        let owner = kp(2);
        let me = Identity::new(*owner.public(), 1000);
        let block = build_cfs_block(BlockBody::Inode(sample_inode(&owner)), me, &owner).unwrap();
        assert!(verify_cfs_block(&block));

        let mut renamed = block.clone();
        if let BlockBody::Inode(i) = &mut renamed.body {
            i.name = "other".into();
        }
        assert!(!verify_cfs_block(&renamed));

        let mut other_uid = block.clone();
        other_uid.author.uid = 1001;
        assert!(!verify_cfs_block(&other_uid));

        let mut garbage = block;
        garbage.client_signature.bytes = vec![0; 3];
        assert!(!verify_cfs_block(&garbage));
    }

    #[test]
    fn build_rejects_foreign_author() {
        let a = kp(4);
        let b = kp(5);
        let res = build_cfs_block(
            BlockBody::Data(DataBlock { payload: vec![] }),
            Identity::new(*b.public(), 0),
            &a,
        );
        assert_eq!(res.unwrap_err(), BlockError::IdentityMismatch);
    }

    #[test]
    fn acl_membership_examples() {
        let k1 = *kp(1).public();
        let k2 = *kp(2).public();
        let acl = Acl::new([Identity::new(k1, 1000)]);
        assert!(acl_permits(&acl, &Identity::new(k1, 1000)));
        assert!(!acl_permits(&acl, &Identity::new(k1, 1001)));
        assert!(!acl_permits(&acl, &Identity::new(k2, 1000)));
    }

    #[test]
    fn acl_order_is_canonical() {
        let ids: Vec<_> = (1..6).map(|s| Identity::new(*kp(s).public(), s as u32)).collect();
        let mut rev = ids.clone();
        rev.reverse();
        assert_eq!(Acl::new(ids.clone()).encode(), Acl::new(rev).encode());
        let dup = Acl::new(ids.iter().copied().chain(ids.iter().copied()));
        assert_eq!(dup.len(), 5);
    }

    #[test]
    fn non_canonical_acl_bytes_rejected() {
        let a = Identity::new(*kp(1).public(), 1);
        let b = Identity::new(*kp(2).public(), 2);
        let sorted = Acl::new([a, b]);
        let mut enc = Encoder::new();
        let (first, second) = (sorted.entries()[1], sorted.entries()[0]);
        enc.u32(2).value(&first).value(&second);
        assert!(Acl::decode(&enc.finish()).is_err());
    }

    #[test]
    fn inherit_acl_copies_and_rejects_files() {
        let k = kp(1);
        let mut dir = sample_inode(&k);
        dir.kind = InodeKind::Directory;
        dir.size = 0;
        dir.data_hashes.clear();
        dir.acl = Acl::new([Identity::new(*k.public(), 0), Identity::new(*kp(2).public(), 1000)]);
        let mut child = inherit_acl(&dir).unwrap();
        assert_eq!(child, dir.acl);
        child = child.with(Identity::new(*kp(3).public(), 5));
        assert_ne!(child, dir.acl);
        assert_eq!(dir.acl.len(), 2);

        let file = sample_inode(&k);
        assert_eq!(inherit_acl(&file), Err(BlockError::InvalidParent));
    }

    #[test]
    fn inode_validation() {
        let k = kp(1);
        let f = sample_inode(&k);
        assert!(f.validate(512).is_ok());
        let mut too_big = f.clone();
        too_big.size = 1025;
        assert!(too_big.validate(512).is_err());
        let mut too_small = f.clone();
        too_small.size = 512;
        assert!(too_small.validate(512).is_err());
        let mut no_acl = f.clone();
        no_acl.acl = Acl::default();
        assert!(no_acl.validate(512).is_err());
        let mut dir_with_data = f;
        dir_with_data.kind = InodeKind::Directory;
        assert!(dir_with_data.validate(512).is_err());
    }

    #[test]
    fn seal_open_round_trip_and_failures() {
        let wk = CapsuleWriteKey::generate(Scheme::Ed25519);
        let rk = wk.read_key();
        let owner = kp(9);
        let inner = build_cfs_block(
            BlockBody::Data(DataBlock { payload: b"payload".to_vec() }),
            Identity::new(*owner.public(), 1),
            &owner,
        )
        .unwrap();
        let outer = OuterBlock {
            capsule_id: Digest([5; 32]),
            prev_hash: Digest::GENESIS,
            timestamp: 42,
            inner,
        };
        let sealed = seal_block(&wk, &outer);
        assert!(sealed.verify_seal(wk.verifying_key()));
        assert_eq!(sealed.digest, hash(&outer.encode()));
        let bytes = sealed.encode();
        let opened = open_block(&rk, &bytes, &sealed.digest).unwrap();
        assert_eq!(opened.outer, outer);

        // Wrong digest requested.
        assert_eq!(
            open_block(&rk, &bytes, &Digest([1; 32])).unwrap_err(),
            OpenError::DigestMismatch
        );
        // Flip a ciphertext byte: decryption fails, and the seal no longer verifies.
        let mut tampered = sealed.clone();
        tampered.ciphertext[20] ^= 1;
        assert!(!tampered.verify_seal(wk.verifying_key()));
        assert_eq!(
            open_block(&rk, &tampered.encode(), &sealed.digest).unwrap_err(),
            OpenError::Decryption
        );
        // Another capsule's read key.
        let other = CapsuleWriteKey::generate(Scheme::Ed25519).read_key();
        assert!(open_block(&other, &bytes, &sealed.digest).is_err());
    }
}

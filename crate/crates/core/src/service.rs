// SPDX-License-Identifier: Apache-2.0

//! Role boundaries. Every component talks to the others through these
//! traits, so the in-process stack and the TCP stack run the same code.
//!
//! Signed payloads always cross a boundary as canonical bytes. The tamper
//! wrappers at the bottom sit exactly on those byte streams and are how the
//! attack harness plays man-in-the-middle.

use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::codec::{tag, Canonical, CodecError, Decoder, Encoder};
use crate::crypto::Digest;
use crate::merkle::{MerkleProof, SignedRoot};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CapsuleError {
    #[error("block not found")]
    NotFound,
    #[error("unknown capsule {0}")]
    UnknownCapsule(Digest),
    #[error("write rejected: {0}")]
    RejectedWrite(String),
    #[error("prev_hash {0} does not name a committed block")]
    DanglingChain(Digest),
    #[error("cursor {from} is beyond head {len}")]
    InvalidCursor { from: u64, len: u64 },
    #[error("signed root does not match the server's tree")]
    RootMismatch,
    #[error("capsule replica is read-only")]
    ReadOnly,
    #[error("storage error: {0}")]
    Io(String),
    #[error("transport error: {0}")]
    Transport(String),
}

impl CapsuleError {
    pub fn is_transport(&self) -> bool {
        matches!(self, CapsuleError::Transport(_))
    }
}

impl From<std::io::Error> for CapsuleError {
    fn from(e: std::io::Error) -> Self {
        CapsuleError::Io(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AppendReceipt {
    pub digest: Digest,
    pub sequence: u64,
    pub proof: MerkleProof,
}

/// Ordered stream of `(sequence, digest)` for one capsule.
pub trait Subscription: Send {
    /// `Ok(None)` on timeout.
    fn next_timeout(&mut self, timeout: Duration) -> Result<Option<(u64, Digest)>, CapsuleError>;

    /// Sequence number of the next event this subscription will deliver.
    fn cursor(&self) -> u64;
}

/// DataCapsule server operations.
pub trait CapsuleService: Send + Sync {
    fn append(
        &self,
        capsule: &Digest,
        sealed: &[u8],
        root: &SignedRoot,
    ) -> Result<AppendReceipt, CapsuleError>;
    fn get(&self, capsule: &Digest, digest: &Digest) -> Result<(Vec<u8>, MerkleProof), CapsuleError>;
    fn leaves(&self, capsule: &Digest) -> Result<Vec<Digest>, CapsuleError>;
    /// Proof against the current root, or against the historical root of
    /// the first `tree_size` blocks.
    fn proof(
        &self,
        capsule: &Digest,
        digest: &Digest,
        tree_size: Option<u64>,
    ) -> Result<MerkleProof, CapsuleError>;
    fn len(&self, capsule: &Digest) -> Result<u64, CapsuleError>;
    fn subscribe(&self, capsule: &Digest, from: u64) -> Result<Box<dyn Subscription>, CapsuleError>;
}

/// Why the middleware refused a write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RejectionKind {
    BadSignature,
    Revoked,
    Forbidden,
    StaleInode,
    Malformed,
    UnknownCapsule,
    NotFound,
    Server,
}

impl RejectionKind {
    pub fn code(self) -> u8 {
        match self {
            RejectionKind::BadSignature => 1,
            RejectionKind::Revoked => 2,
            RejectionKind::Forbidden => 3,
            RejectionKind::StaleInode => 4,
            RejectionKind::Malformed => 5,
            RejectionKind::UnknownCapsule => 6,
            RejectionKind::NotFound => 7,
            RejectionKind::Server => 8,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            1 => RejectionKind::BadSignature,
            2 => RejectionKind::Revoked,
            3 => RejectionKind::Forbidden,
            4 => RejectionKind::StaleInode,
            5 => RejectionKind::Malformed,
            6 => RejectionKind::UnknownCapsule,
            7 => RejectionKind::NotFound,
            8 => RejectionKind::Server,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            RejectionKind::BadSignature => "bad-signature",
            RejectionKind::Revoked => "revoked",
            RejectionKind::Forbidden => "forbidden",
            RejectionKind::StaleInode => "stale-inode",
            RejectionKind::Malformed => "malformed",
            RejectionKind::UnknownCapsule => "unknown-capsule",
            RejectionKind::NotFound => "not-found",
            RejectionKind::Server => "server",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}: {detail}", kind.name())]
pub struct Rejection {
    pub kind: RejectionKind,
    pub detail: String,
    /// Current version digest, for stale-inode rejections.
    pub current: Option<Digest>,
}

impl Rejection {
    pub fn new(kind: RejectionKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
            current: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PutError {
    #[error("rejected: {0}")]
    Rejected(Rejection),
    /// Retryable: no state changed.
    #[error("transport: {0}")]
    Transport(String),
}

impl PutError {
    pub fn rejection(&self) -> Option<&Rejection> {
        match self {
            PutError::Rejected(r) => Some(r),
            PutError::Transport(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PutReceipt {
    pub digest: Digest,
    pub timestamp: u64,
    pub sequence: u64,
}

impl Canonical for PutReceipt {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(tag::PUT_RECEIPT)
            .value(&self.digest)
            .u64(self.timestamp)
            .u64(self.sequence);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.expect_tag(tag::PUT_RECEIPT, "PutReceipt")?;
        Ok(Self {
            digest: dec.value()?,
            timestamp: dec.u64()?,
            sequence: dec.u64()?,
        })
    }
}

/// Middleware write path. Requests are canonical bytes of
/// [`crate::middleware::PutRequest`] / [`crate::middleware::RevokeRequest`].
pub trait WriteService: Send + Sync {
    fn put(&self, request: &[u8]) -> Result<PutReceipt, PutError>;
    /// Returns the number of ACL-scrub versions emitted.
    fn revoke(&self, request: &[u8]) -> Result<u64, PutError>;
}

pub type ByteTamper = Arc<dyn Fn(&mut Vec<u8>) + Send + Sync>;

/// Applies a mutation to every middleware-bound request.
pub struct TamperingWriter {
    inner: Arc<dyn WriteService>,
    hook: ByteTamper,
}

impl TamperingWriter {
    pub fn new(inner: Arc<dyn WriteService>, hook: ByteTamper) -> Self {
        Self { inner, hook }
    }
}

impl WriteService for TamperingWriter {
    fn put(&self, request: &[u8]) -> Result<PutReceipt, PutError> {
        let mut bytes = request.to_vec();
        (self.hook)(&mut bytes);
        self.inner.put(&bytes)
    }

    fn revoke(&self, request: &[u8]) -> Result<u64, PutError> {
        self.inner.revoke(request)
    }
}

/// Applies a mutation to every server-bound append.
pub struct TamperingCapsuleService {
    inner: Arc<dyn CapsuleService>,
    hook: ByteTamper,
}

impl TamperingCapsuleService {
    pub fn new(inner: Arc<dyn CapsuleService>, hook: ByteTamper) -> Self {
        Self { inner, hook }
    }
}

impl CapsuleService for TamperingCapsuleService {
    fn append(
        &self,
        capsule: &Digest,
        sealed: &[u8],
        root: &SignedRoot,
    ) -> Result<AppendReceipt, CapsuleError> {
        let mut bytes = sealed.to_vec();
        (self.hook)(&mut bytes);
        self.inner.append(capsule, &bytes, root)
    }

    fn get(&self, capsule: &Digest, digest: &Digest) -> Result<(Vec<u8>, MerkleProof), CapsuleError> {
        self.inner.get(capsule, digest)
    }

    fn leaves(&self, capsule: &Digest) -> Result<Vec<Digest>, CapsuleError> {
        self.inner.leaves(capsule)
    }

    fn proof(
        &self,
        capsule: &Digest,
        digest: &Digest,
        tree_size: Option<u64>,
    ) -> Result<MerkleProof, CapsuleError> {
        self.inner.proof(capsule, digest, tree_size)
    }

    fn len(&self, capsule: &Digest) -> Result<u64, CapsuleError> {
        self.inner.len(capsule)
    }

    fn subscribe(&self, capsule: &Digest, from: u64) -> Result<Box<dyn Subscription>, CapsuleError> {
        self.inner.subscribe(capsule, from)
    }
}

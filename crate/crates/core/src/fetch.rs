// SPDX-License-Identifier: Apache-2.0

//! Verified reads from an untrusted capsule server.

use thiserror::Error;

use crate::block::{open_block, OpenError, OpenedBlock};
use crate::crypto::{CapsuleReadKey, Digest};
use crate::merkle::verify_proof;
use crate::service::{CapsuleError, CapsuleService};

/// Why a fetched block was refused. The names double as reason codes in
/// rebuild statistics.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FetchError {
    #[error("server: {0}")]
    Server(CapsuleError),
    #[error("merkle proof did not verify")]
    Proof,
    #[error("{0}")]
    Open(OpenError),
}

impl FetchError {
    pub fn reason(&self) -> &'static str {
        match self {
            FetchError::Server(CapsuleError::NotFound) => "not-found",
            FetchError::Server(_) => "server",
            FetchError::Proof => "merkle",
            FetchError::Open(OpenError::Decode(_)) => "decode",
            FetchError::Open(OpenError::Decryption) => "decryption",
            FetchError::Open(OpenError::MiddlewareSignature) => "middleware-signature",
            FetchError::Open(OpenError::DigestMismatch) => "digest",
            FetchError::Open(OpenError::HeaderMismatch) => "header",
            FetchError::Open(OpenError::ClientSignature) => "client-signature",
        }
    }

    pub fn is_transport(&self) -> bool {
        matches!(self, FetchError::Server(e) if e.is_transport())
    }
}

/// GET `digest`, then check its Merkle proof, decrypt, and verify both
/// signatures and the digest itself.
pub fn fetch_verified(
    server: &dyn CapsuleService,
    capsule: &Digest,
    digest: &Digest,
    key: &CapsuleReadKey,
) -> Result<OpenedBlock, FetchError> {
    let (bytes, proof) = server.get(capsule, digest).map_err(FetchError::Server)?;
    if proof.root.capsule_id != *capsule || !verify_proof(digest, &proof, key.verifying_key()) {
        return Err(FetchError::Proof);
    }
    let opened = open_block(key, &bytes, digest).map_err(FetchError::Open)?;
    if opened.outer.capsule_id != *capsule {
        return Err(FetchError::Open(OpenError::HeaderMismatch));
    }
    Ok(opened)
}

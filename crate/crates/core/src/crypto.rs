// SPDX-License-Identifier: Apache-2.0

//! Hashing, signatures and capsule-scoped authenticated encryption.
//!
//! Signatures are Ed25519 over the SHA-256 digest of the canonical payload.
//! Outer-block encryption is ChaCha20-Poly1305 under a capsule secret; the
//! write key pairs that secret with the capsule signing key, the read key
//! pairs it with the matching verifying key.
//!
//! Every key records its [`Scheme`]. The `Null` scheme exists only so the
//! benchmark harness can measure the stack with cryptography switched off:
//! its signatures are empty, its "encryption" is the identity, and it must
//! never be used for data that matters.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, Verifier};
use rand::RngCore;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};

pub const DIGEST_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("malformed key material: {0}")]
    KeyFormat(String),
    #[error("decryption failed: wrong key or tampered ciphertext")]
    DecryptionFailed,
    #[error("key file: {0}")]
    KeyFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// SHA-256 content hash.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    /// Sentinel used as `prev_hash` for the first block of a capsule.
    pub const GENESIS: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let raw = hex::decode(s.trim()).map_err(|e| CryptoError::KeyFormat(e.to_string()))?;
        let arr: [u8; DIGEST_LEN] = raw
            .try_into()
            .map_err(|_| CryptoError::KeyFormat("digest must be 32 bytes".into()))?;
        Ok(Digest(arr))
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..6])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Canonical for Digest {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.fixed(&self.0);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Digest(dec.fixed()?))
    }
}

pub fn hash(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Hash of several byte strings concatenated, without materializing them.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    /// Cryptography disabled (benchmarking only).
    Null,
    Ed25519,
}

impl Scheme {
    fn code(self) -> u8 {
        match self {
            Scheme::Null => 0,
            Scheme::Ed25519 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self, CodecError> {
        match c {
            0 => Ok(Scheme::Null),
            1 => Ok(Scheme::Ed25519),
            _ => Err(CodecError::Invalid("unknown key scheme")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Null => "null",
            Scheme::Ed25519 => "ed25519",
        }
    }

    pub fn from_crypto_enabled(enabled: bool) -> Self {
        if enabled {
            Scheme::Ed25519
        } else {
            Scheme::Null
        }
    }
}

/// Signature verification key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey {
    scheme: Scheme,
    bytes: [u8; 32],
}

impl PublicKey {
    pub fn from_bytes(scheme: Scheme, bytes: [u8; 32]) -> Result<Self, CryptoError> {
        if scheme == Scheme::Ed25519 {
            ed25519_dalek::VerifyingKey::from_bytes(&bytes)
                .map_err(|e| CryptoError::KeyFormat(e.to_string()))?;
        }
        Ok(Self { scheme, bytes })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.bytes
    }

    /// `hash(encode(public_key))`.
    pub fn key_id(&self) -> Digest {
        hash(&self.encode())
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PublicKey({}:{})",
            self.scheme.name(),
            hex::encode(&self.bytes[..6])
        )
    }
}

impl Canonical for PublicKey {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(self.scheme.code()).fixed(&self.bytes);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let scheme = Scheme::from_code(dec.u8()?)?;
        let bytes = dec.fixed()?;
        // Structural decode only; an invalid curve point fails verification later.
        Ok(Self { scheme, bytes })
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature {
    pub signer_key_id: Digest,
    pub bytes: Vec<u8>,
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Signature(by {}, {} bytes)",
            self.signer_key_id.short(),
            self.bytes.len()
        )
    }
}

impl Canonical for Signature {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.value(&self.signer_key_id).bytes(&self.bytes);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            signer_key_id: dec.value()?,
            bytes: dec.bytes()?.to_vec(),
        })
    }
}

/// A signing key together with its public half.
#[derive(Clone)]
pub struct KeyPair {
    secret: [u8; 32],
    public: PublicKey,
    key_id: Digest,
    signer: Option<ed25519_dalek::SigningKey>,
}

impl KeyPair {
    pub fn generate(scheme: Scheme) -> Self {
        let mut seed = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut seed);
        Self::from_seed(scheme, seed)
    }

    pub fn from_seed(scheme: Scheme, seed: [u8; 32]) -> Self {
        let (public_bytes, signer) = match scheme {
            Scheme::Ed25519 => {
                let sk = ed25519_dalek::SigningKey::from_bytes(&seed);
                (sk.verifying_key().to_bytes(), Some(sk))
            }
            Scheme::Null => (hash_parts(&[b"null-key", &seed]).0, None),
        };
        let public = PublicKey {
            scheme,
            bytes: public_bytes,
        };
        Self {
            secret: seed,
            key_id: public.key_id(),
            public,
            signer,
        }
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn key_id(&self) -> Digest {
        self.key_id
    }

    pub fn scheme(&self) -> Scheme {
        self.public.scheme
    }

    pub fn sign(&self, payload: &[u8]) -> Signature {
        let bytes = match &self.signer {
            Some(sk) => sk.sign(hash(payload).as_bytes()).to_bytes().to_vec(),
            None => Vec::new(),
        };
        Signature {
            signer_key_id: self.key_id,
            bytes,
        }
    }

    pub(crate) fn secret_bytes(&self) -> &[u8; 32] {
        &self.secret
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

/// Free-function form of [`KeyPair::sign`].
pub fn sign(key: &KeyPair, payload: &[u8]) -> Signature {
    key.sign(payload)
}

/// True iff `sig` was produced by the private half of `key` over exactly `payload`.
///
/// Never panics; malformed keys or signatures simply fail.
pub fn verify(key: &PublicKey, payload: &[u8], sig: &Signature) -> bool {
    if sig.signer_key_id != key.key_id() {
        return false;
    }
    match key.scheme {
        Scheme::Null => sig.bytes.is_empty(),
        Scheme::Ed25519 => {
            let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&key.bytes) else {
                return false;
            };
            let Ok(raw) = <[u8; 64]>::try_from(sig.bytes.as_slice()) else {
                return false;
            };
            let sig = ed25519_dalek::Signature::from_bytes(&raw);
            vk.verify(hash(payload).as_bytes(), &sig).is_ok()
        }
    }
}

/// Symmetric capsule secret shared between the write and read keys.
#[derive(Clone, PartialEq, Eq)]
struct CapsuleSecret {
    scheme: Scheme,
    key: [u8; 32],
}

impl CapsuleSecret {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(self.scheme.code()).fixed(&self.key);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            scheme: Scheme::from_code(dec.u8()?)?,
            key: dec.fixed()?,
        })
    }
}

/// Held only by the middleware: signs and encrypts outer blocks.
#[derive(Clone)]
pub struct CapsuleWriteKey {
    signing: KeyPair,
    secret: CapsuleSecret,
}

/// Shared among clients: decrypts outer blocks and verifies middleware signatures.
#[derive(Clone, PartialEq, Eq)]
pub struct CapsuleReadKey {
    verifying: PublicKey,
    secret: CapsuleSecret,
}

impl CapsuleWriteKey {
    pub fn generate(scheme: Scheme) -> Self {
        let mut key = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut key);
        Self {
            signing: KeyPair::generate(scheme),
            secret: CapsuleSecret { scheme, key },
        }
    }

    pub fn read_key(&self) -> CapsuleReadKey {
        CapsuleReadKey {
            verifying: *self.signing.public(),
            secret: self.secret.clone(),
        }
    }

    pub fn verifying_key(&self) -> &PublicKey {
        self.signing.public()
    }

    pub fn sign(&self, payload: &[u8]) -> Signature {
        self.signing.sign(payload)
    }

    pub fn scheme(&self) -> Scheme {
        self.secret.scheme
    }
}

impl fmt::Debug for CapsuleWriteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CapsuleWriteKey")
            .field("verifying", self.signing.public())
            .finish_non_exhaustive()
    }
}

impl CapsuleReadKey {
    pub fn verifying_key(&self) -> &PublicKey {
        &self.verifying
    }
}

impl fmt::Debug for CapsuleReadKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CapsuleReadKey")
            .field("verifying", &self.verifying)
            .finish_non_exhaustive()
    }
}

/// Authenticated encryption under the capsule secret.
///
/// Output layout: `nonce (12) ++ ciphertext ++ tag (16)`. `aad` is bound to
/// the ciphertext but not encrypted.
pub fn encrypt_outer(key: &CapsuleWriteKey, aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    let mut nonce = [0u8; NONCE_LEN];
    match key.secret.scheme {
        Scheme::Null => {
            let mut out = Vec::with_capacity(NONCE_LEN + plaintext.len());
            out.extend_from_slice(&nonce);
            out.extend_from_slice(plaintext);
            out
        }
        Scheme::Ed25519 => {
            rand::thread_rng().fill_bytes(&mut nonce);
            let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.secret.key));
            let ct = cipher
                .encrypt(
                    Nonce::from_slice(&nonce),
                    Payload {
                        msg: plaintext,
                        aad,
                    },
                )
                .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
            let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
            out.extend_from_slice(&nonce);
            out.extend_from_slice(&ct);
            out
        }
    }
}

pub fn decrypt_outer(
    key: &CapsuleReadKey,
    aad: &[u8],
    ciphertext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < NONCE_LEN {
        return Err(CryptoError::DecryptionFailed);
    }
    let (nonce, body) = ciphertext.split_at(NONCE_LEN);
    match key.secret.scheme {
        Scheme::Null => Ok(body.to_vec()),
        Scheme::Ed25519 => {
            let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.secret.key));
            cipher
                .decrypt(Nonce::from_slice(nonce), Payload { msg: body, aad })
                .map_err(|_| CryptoError::DecryptionFailed)
        }
    }
}

// ---------------------------------------------------------------------------
// Key files
//
// magic "CFSK" ++ u8 version (1) ++ u8 kind ++ bytes(payload)
// ---------------------------------------------------------------------------

const KEY_MAGIC: &[u8; 4] = b"CFSK";
const KEY_FILE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum KeyKind {
    KeyPair = 1,
    PublicKey = 2,
    WriteKey = 3,
    ReadKey = 4,
}

fn encode_key_file(kind: KeyKind, payload: &[u8]) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.fixed(KEY_MAGIC)
        .u8(KEY_FILE_VERSION)
        .u8(kind as u8)
        .bytes(payload);
    enc.finish()
}

fn decode_key_file(bytes: &[u8], kind: KeyKind) -> Result<Vec<u8>, CryptoError> {
    let mut dec = Decoder::new(bytes);
    let magic: [u8; 4] = dec.fixed()?;
    if &magic != KEY_MAGIC {
        return Err(CryptoError::KeyFile("bad magic".into()));
    }
    if dec.u8()? != KEY_FILE_VERSION {
        return Err(CryptoError::KeyFile("unsupported version".into()));
    }
    let got = dec.u8()?;
    if got != kind as u8 {
        return Err(CryptoError::KeyFile(format!(
            "expected key kind {}, found {got}",
            kind as u8
        )));
    }
    let payload = dec.bytes()?.to_vec();
    dec.finish()?;
    Ok(payload)
}

fn write_secret_file(path: &Path, bytes: &[u8]) -> io::Result<()> {
    fs::write(path, bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(0o600))?;
    }
    Ok(())
}

impl KeyPair {
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u8(self.scheme().code()).fixed(&self.secret);
        encode_key_file(KeyKind::KeyPair, &enc.finish())
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let payload = decode_key_file(bytes, KeyKind::KeyPair)?;
        let mut dec = Decoder::new(&payload);
        let scheme = Scheme::from_code(dec.u8()?)?;
        let seed = dec.fixed()?;
        dec.finish()?;
        Ok(Self::from_seed(scheme, seed))
    }

    pub fn save(&self, path: &Path) -> Result<(), CryptoError> {
        Ok(write_secret_file(path, &self.to_file_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, CryptoError> {
        Self::from_file_bytes(&fs::read(path)?)
    }
}

impl PublicKey {
    pub fn save(&self, path: &Path) -> Result<(), CryptoError> {
        Ok(fs::write(
            path,
            encode_key_file(KeyKind::PublicKey, &self.encode()),
        )?)
    }

    pub fn load(path: &Path) -> Result<Self, CryptoError> {
        let payload = decode_key_file(&fs::read(path)?, KeyKind::PublicKey)?;
        let pk = PublicKey::decode(&payload)?;
        PublicKey::from_bytes(pk.scheme, pk.bytes)
    }
}

impl CapsuleWriteKey {
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u8(self.signing.scheme().code())
            .fixed(self.signing.secret_bytes());
        self.secret.encode_into(&mut enc);
        encode_key_file(KeyKind::WriteKey, &enc.finish())
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let payload = decode_key_file(bytes, KeyKind::WriteKey)?;
        let mut dec = Decoder::new(&payload);
        let scheme = Scheme::from_code(dec.u8()?)?;
        let seed = dec.fixed()?;
        let secret = CapsuleSecret::decode_from(&mut dec)?;
        dec.finish()?;
        Ok(Self {
            signing: KeyPair::from_seed(scheme, seed),
            secret,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CryptoError> {
        Ok(write_secret_file(path, &self.to_file_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, CryptoError> {
        Self::from_file_bytes(&fs::read(path)?)
    }
}

impl CapsuleReadKey {
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.verifying.encode_into(&mut enc);
        self.secret.encode_into(&mut enc);
        encode_key_file(KeyKind::ReadKey, &enc.finish())
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let payload = decode_key_file(bytes, KeyKind::ReadKey)?;
        let mut dec = Decoder::new(&payload);
        let verifying = PublicKey::decode_from(&mut dec)?;
        let secret = CapsuleSecret::decode_from(&mut dec)?;
        dec.finish()?;
        Ok(Self { verifying, secret })
    }

    pub fn save(&self, path: &Path) -> Result<(), CryptoError> {
        Ok(write_secret_file(path, &self.to_file_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, CryptoError> {
        Self::from_file_bytes(&fs::read(path)?)
    }
}

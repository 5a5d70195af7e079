// SPDX-License-Identifier: Apache-2.0

//! Canonical byte encoding for everything that gets hashed or signed.
//!
//! The grammar is deliberately small so that any implementation, in any
//! language, can reproduce it bit-for-bit:
//!
//! ```text
//! u8        1 byte
//! u32       4 bytes, little-endian
//! u64       8 bytes, little-endian
//! bytes     u32 length ++ raw bytes
//! string    bytes holding UTF-8
//! digest    32 raw bytes (no length prefix)
//! option<T> u8 0 (absent) | u8 1 ++ T
//! list<T>   u32 count ++ T*
//! ```
//!
//! Every top-level structure begins with a one-byte type tag (see
//! [`tag`]). Fields are emitted in declaration order; there are no maps and
//! no optional trailing fields, so two equal values always encode to the
//! same bytes. Decoding is strict: unknown tags, overlong lengths, invalid
//! UTF-8 and trailing bytes are all errors.
//!
//! Transport framing never re-encodes these bytes. Anything that crosses a
//! process boundary and carries a signature travels as the opaque output of
//! [`Canonical::encode`].

use thiserror::Error;

/// Upper bound on any single length-prefixed field.
pub const MAX_FIELD_LEN: usize = 64 << 20;

/// Type tags for top-level structures.
pub mod tag {
    pub const INODE_BLOCK: u8 = 0x01;
    pub const DATA_BLOCK: u8 = 0x02;
    pub const CFS_BLOCK: u8 = 0x10;
    pub const CFS_SIGNED_PAYLOAD: u8 = 0x11;
    pub const OUTER_BLOCK: u8 = 0x20;
    pub const SIGNED_OUTER: u8 = 0x21;
    pub const SEALED_BLOCK: u8 = 0x30;
    pub const SEAL_PAYLOAD: u8 = 0x31;
    pub const SIGNED_ROOT: u8 = 0x40;
    pub const ROOT_PAYLOAD: u8 = 0x41;
    pub const MERKLE_PROOF: u8 = 0x42;
    pub const CAPSULE_METADATA: u8 = 0x48;
    pub const PUT_REQUEST: u8 = 0x50;
    pub const PUT_RECEIPT: u8 = 0x51;
    pub const REVOKE_REQUEST: u8 = 0x52;
    pub const REVOKE_PAYLOAD: u8 = 0x53;
    pub const JOURNAL_RECORD: u8 = 0x60;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unexpected end of input: need {need} bytes, have {have}")]
    UnexpectedEof { need: usize, have: usize },
    #[error("bad tag for {what}: got {got:#04x}")]
    BadTag { what: &'static str, got: u8 },
    #[error("field length {0} exceeds limit")]
    LengthOverflow(u64),
    #[error("invalid UTF-8 in string field")]
    InvalidUtf8,
    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),
    #[error("invalid value: {0}")]
    Invalid(&'static str),
}

/// Append-only writer for the canonical grammar.
#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(cap: usize) -> Self {
        Self {
            buf: Vec::with_capacity(cap),
        }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// Raw bytes with no length prefix. Only for fixed-width fields.
    pub fn fixed(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        assert!(v.len() <= MAX_FIELD_LEN, "field too long for canonical encoding");
        self.u32(v.len() as u32);
        self.fixed(v)
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn option<T>(&mut self, v: Option<&T>, f: impl FnOnce(&mut Self, &T)) -> &mut Self {
        match v {
            None => {
                self.u8(0);
            }
            Some(inner) => {
                self.u8(1);
                f(self, inner);
            }
        }
        self
    }

    pub fn list<T>(&mut self, items: &[T], mut f: impl FnMut(&mut Self, &T)) -> &mut Self {
        self.u32(items.len() as u32);
        for item in items {
            f(self, item);
        }
        self
    }

    pub fn value<T: Canonical>(&mut self, v: &T) -> &mut Self {
        v.encode_into(self);
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Strict reader for the canonical grammar.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::UnexpectedEof {
                need: n,
                have: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool, CodecError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(CodecError::Invalid("boolean must be 0 or 1")),
        }
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        let b = self.take(N)?;
        Ok(b.try_into().expect("exact length"))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.u32()? as usize;
        if len > MAX_FIELD_LEN {
            return Err(CodecError::LengthOverflow(len as u64));
        }
        self.take(len)
    }

    pub fn string(&mut self) -> Result<String, CodecError> {
        let b = self.bytes()?;
        std::str::from_utf8(b)
            .map(str::to_owned)
            .map_err(|_| CodecError::InvalidUtf8)
    }

    pub fn expect_tag(&mut self, expected: u8, what: &'static str) -> Result<(), CodecError> {
        let got = self.u8()?;
        if got != expected {
            return Err(CodecError::BadTag { what, got });
        }
        Ok(())
    }

    pub fn option<T>(
        &mut self,
        f: impl FnOnce(&mut Self) -> Result<T, CodecError>,
    ) -> Result<Option<T>, CodecError> {
        match self.u8()? {
            0 => Ok(None),
            1 => f(self).map(Some),
            _ => Err(CodecError::Invalid("option tag must be 0 or 1")),
        }
    }

    pub fn list<T>(
        &mut self,
        mut f: impl FnMut(&mut Self) -> Result<T, CodecError>,
    ) -> Result<Vec<T>, CodecError> {
        let count = self.u32()? as usize;
        // Every element takes at least one byte; reject counts that cannot fit.
        if count > self.remaining() {
            return Err(CodecError::LengthOverflow(count as u64));
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(f(self)?);
        }
        Ok(out)
    }

    pub fn value<T: Canonical>(&mut self) -> Result<T, CodecError> {
        T::decode_from(self)
    }

    pub fn finish(self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }
}

/// A type with exactly one byte representation.
pub trait Canonical: Sized {
    fn encode_into(&self, enc: &mut Encoder);
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError>;

    fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode_into(&mut enc);
        enc.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let v = Self::decode_from(&mut dec)?;
        dec.finish()?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_little_endian() {
        let mut e = Encoder::new();
        e.u32(0x0102_0304).u64(1);
        assert_eq!(e.finish(), vec![4, 3, 2, 1, 1, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn bytes_are_length_prefixed() {
        let mut e = Encoder::new();
        e.bytes(b"ab").str("");
        assert_eq!(e.finish(), vec![2, 0, 0, 0, b'a', b'b', 0, 0, 0, 0]);
    }

    #[test]
    fn decoder_rejects_truncation_and_trailing() {
        let mut d = Decoder::new(&[1, 0, 0]);
        assert!(matches!(d.u32(), Err(CodecError::UnexpectedEof { .. })));

        let d = Decoder::new(&[0]);
        assert_eq!(d.finish(), Err(CodecError::TrailingBytes(1)));
    }

    #[test]
    fn list_count_bomb_rejected() {
        let mut d = Decoder::new(&[0xff, 0xff, 0xff, 0x7f]);
        assert!(matches!(d.list(|d| d.u8()), Err(CodecError::LengthOverflow(_))));
    }

    #[test]
    fn invalid_utf8_rejected() {
        let mut d = Decoder::new(&[1, 0, 0, 0, 0xff]);
        assert_eq!(d.string(), Err(CodecError::InvalidUtf8));
    }
}

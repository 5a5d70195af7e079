// SPDX-License-Identifier: Apache-2.0

//! On-disk form of one capsule.
//!
//! `<store>` is the authoritative append-only log:
//!
//! ```text
//! record := u32 payload_len ++ u32 crc32(payload) ++ payload
//! payload := bytes(sealed block) ++ SignedRoot
//! ```
//!
//! `<store>.idx` is a rebuildable index of fixed 80-byte entries
//! (`u64 offset ++ u32 payload_len ++ digest ++ prev_hash ++ u32 crc32`).
//! If it disagrees with the log in any way it is discarded and rebuilt from
//! a full scan. A torn record at the tail of the log is truncated.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use log::warn;

use crate::block::SealedBlock;
use crate::codec::{Canonical, Decoder, Encoder};
use crate::crypto::Digest;
use crate::merkle::SignedRoot;

const HEADER_LEN: u64 = 8;
const INDEX_ENTRY_LEN: usize = 80;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LogEntry {
    pub offset: u64,
    pub len: u32,
    pub digest: Digest,
    pub prev_hash: Digest,
}

impl LogEntry {
    fn end(&self) -> u64 {
        self.offset + HEADER_LEN + self.len as u64
    }

    fn to_index_bytes(self) -> [u8; INDEX_ENTRY_LEN] {
        let mut out = [0u8; INDEX_ENTRY_LEN];
        out[..8].copy_from_slice(&self.offset.to_le_bytes());
        out[8..12].copy_from_slice(&self.len.to_le_bytes());
        out[12..44].copy_from_slice(self.digest.as_bytes());
        out[44..76].copy_from_slice(self.prev_hash.as_bytes());
        let crc = crc32fast::hash(&out[..76]);
        out[76..].copy_from_slice(&crc.to_le_bytes());
        out
    }

    fn from_index_bytes(b: &[u8]) -> Option<Self> {
        let crc = u32::from_le_bytes(b[76..80].try_into().ok()?);
        if crc32fast::hash(&b[..76]) != crc {
            return None;
        }
        Some(Self {
            offset: u64::from_le_bytes(b[..8].try_into().ok()?),
            len: u32::from_le_bytes(b[8..12].try_into().ok()?),
            digest: Digest(b[12..44].try_into().ok()?),
            prev_hash: Digest(b[44..76].try_into().ok()?),
        })
    }
}

pub(crate) struct BlockLog {
    log: File,
    index: File,
    end: u64,
    sync: bool,
}

fn index_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".idx");
    PathBuf::from(p)
}

fn encode_payload(sealed: &[u8], root: &SignedRoot) -> Vec<u8> {
    let mut enc = Encoder::with_capacity(sealed.len() + 160);
    enc.bytes(sealed).value(root);
    enc.finish()
}

fn decode_payload(payload: &[u8]) -> io::Result<(Vec<u8>, SignedRoot)> {
    let mut dec = Decoder::new(payload);
    let sealed = dec.bytes().map_err(invalid)?.to_vec();
    let root = dec.value().map_err(invalid)?;
    dec.finish().map_err(invalid)?;
    Ok((sealed, root))
}

fn invalid(e: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e.to_string())
}

impl BlockLog {
    /// Open (or create) a capsule log, returning its entries in append order.
    pub fn open(path: &Path, sync: bool) -> io::Result<(Self, Vec<LogEntry>)> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut log = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let ipath = index_path(path);
        let log_len = log.metadata()?.len();

        let entries = match Self::load_index(&ipath, log_len) {
            Some(entries) => entries,
            None => {
                let (entries, good_end) = Self::scan(&mut log)?;
                if good_end < log_len {
                    warn!(
                        "truncating {} torn bytes at the tail of {}",
                        log_len - good_end,
                        path.display()
                    );
                    log.set_len(good_end)?;
                    log.sync_all()?;
                }
                let mut idx = File::create(&ipath)?;
                for e in &entries {
                    idx.write_all(&e.to_index_bytes())?;
                }
                idx.sync_all()?;
                entries
            }
        };
        let end = entries.last().map_or(0, |e| e.end());
        let index = OpenOptions::new().append(true).create(true).open(&ipath)?;
        Ok((
            Self {
                log,
                index,
                end,
                sync,
            },
            entries,
        ))
    }

    fn load_index(ipath: &Path, log_len: u64) -> Option<Vec<LogEntry>> {
        let raw = std::fs::read(ipath).ok()?;
        if raw.len() % INDEX_ENTRY_LEN != 0 {
            return None;
        }
        let mut entries = Vec::with_capacity(raw.len() / INDEX_ENTRY_LEN);
        let mut expected_offset = 0u64;
        for chunk in raw.chunks(INDEX_ENTRY_LEN) {
            let e = LogEntry::from_index_bytes(chunk)?;
            if e.offset != expected_offset {
                return None;
            }
            expected_offset = e.end();
            entries.push(e);
        }
        (expected_offset == log_len).then_some(entries)
    }

    fn scan(log: &mut File) -> io::Result<(Vec<LogEntry>, u64)> {
        let mut raw = Vec::new();
        log.read_to_end(&mut raw)?;
        let mut entries = Vec::new();
        let mut pos = 0usize;
        while raw.len() - pos >= HEADER_LEN as usize {
            let len = u32::from_le_bytes(raw[pos..pos + 4].try_into().unwrap()) as usize;
            let crc = u32::from_le_bytes(raw[pos + 4..pos + 8].try_into().unwrap());
            let start = pos + HEADER_LEN as usize;
            if raw.len() - start < len {
                break;
            }
            let payload = &raw[start..start + len];
            if crc32fast::hash(payload) != crc {
                break;
            }
            let Ok((sealed, _)) = decode_payload(payload) else {
                break;
            };
            let Ok(block) = SealedBlock::decode(&sealed) else {
                break;
            };
            entries.push(LogEntry {
                offset: pos as u64,
                len: len as u32,
                digest: block.digest,
                prev_hash: block.prev_hash,
            });
            pos = start + len;
        }
        Ok((entries, pos as u64))
    }

    pub fn append(
        &mut self,
        sealed: &[u8],
        root: &SignedRoot,
        digest: Digest,
        prev_hash: Digest,
    ) -> io::Result<LogEntry> {
        let payload = encode_payload(sealed, root);
        let mut rec = Vec::with_capacity(payload.len() + HEADER_LEN as usize);
        rec.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        rec.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        rec.extend_from_slice(&payload);
        self.log.write_all(&rec)?;
        if self.sync {
            self.log.sync_data()?;
        }
        let entry = LogEntry {
            offset: self.end,
            len: payload.len() as u32,
            digest,
            prev_hash,
        };
        self.end = entry.end();
        // Best effort: a stale index is rebuilt on the next open.
        if let Err(e) = self.index.write_all(&entry.to_index_bytes()) {
            warn!("index append failed: {e}");
        }
        Ok(entry)
    }

    pub fn read(&self, entry: &LogEntry) -> io::Result<(Vec<u8>, SignedRoot)> {
        let mut payload = vec![0u8; entry.len as usize];
        self.log
            .read_exact_at(&mut payload, entry.offset + HEADER_LEN)?;
        decode_payload(&payload)
    }
}

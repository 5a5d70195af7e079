// SPDX-License-Identifier: Apache-2.0

//! Client write journal.
//!
//! Blocks are made durable here before a write returns and drained to the
//! middleware later. The file is an append-only sequence of records:
//!
//! ```text
//! frame  := u32 len ++ u32 crc32(payload) ++ payload
//! record := Entry(JournalEntry) | Committed(seq, final_digest) | Purge([seq])
//! ```
//!
//! Replay folds the records into the set of live entries. A torn tail is
//! dropped. Data blocks are referenced by a placeholder (the hash of their
//! canonical body) until the middleware assigns the final digest.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::warn;
use thiserror::Error;

use crate::block::{BlockBody, CfsBlock, InodeNumber};
use crate::codec::{tag, Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{hash, Digest};

/// `block_index` of metadata entries.
pub const INODE_SENTINEL: u64 = u64::MAX;

const JOURNAL_FILE: &str = "journal.log";

/// Which inode fields an inode entry changed; rebasing onto a newer
/// version keeps these from the entry and everything else from the winner.
pub mod changes {
    pub const DATA: u8 = 1;
    pub const ACL: u8 = 2;
    /// Name or parent.
    pub const NAME: u8 = 4;
    pub const DELETED: u8 = 8;
    pub const CREATE: u8 = 16;
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal I/O: {0}")]
    Io(#[from] io::Error),
    #[error("sequence {seq} is not after {last}")]
    Sequence { seq: u64, last: u64 },
    #[error("unknown journal sequence {0}")]
    UnknownSequence(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JournalEntry {
    pub seq: u64,
    pub inode: InodeNumber,
    /// Position within the file, or [`INODE_SENTINEL`].
    pub block_index: u64,
    /// [`changes`] bits; zero for data entries.
    pub changes: u8,
    pub placeholder: Digest,
    pub body: CfsBlock,
}

impl JournalEntry {
    pub fn new(seq: u64, inode: InodeNumber, block_index: u64, changes: u8, body: CfsBlock) -> Self {
        Self {
            seq,
            inode,
            block_index,
            changes,
            placeholder: placeholder_of(&body.body),
            body,
        }
    }

    pub fn is_inode(&self) -> bool {
        self.block_index == INODE_SENTINEL
    }
}

/// Provisional digest of a body not yet committed.
pub fn placeholder_of(body: &BlockBody) -> Digest {
    hash(&body.encode())
}

impl Canonical for JournalEntry {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u64(self.seq)
            .u64(self.inode)
            .u64(self.block_index)
            .u8(self.changes)
            .value(&self.placeholder)
            .value(&self.body);
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            seq: dec.u64()?,
            inode: dec.u64()?,
            block_index: dec.u64()?,
            changes: dec.u8()?,
            placeholder: dec.value()?,
            body: dec.value()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Record {
    Entry(JournalEntry),
    Committed { seq: u64, digest: Digest },
    Purge(Vec<u64>),
}

impl Canonical for Record {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.u8(tag::JOURNAL_RECORD);
        match self {
            Record::Entry(e) => {
                enc.u8(1).value(e);
            }
            Record::Committed { seq, digest } => {
                enc.u8(2).u64(*seq).value(digest);
            }
            Record::Purge(seqs) => {
                enc.u8(3).list(seqs, |e, s| {
                    e.u64(*s);
                });
            }
        }
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.expect_tag(tag::JOURNAL_RECORD, "JournalRecord")?;
        Ok(match dec.u8()? {
            1 => Record::Entry(dec.value()?),
            2 => Record::Committed {
                seq: dec.u64()?,
                digest: dec.value()?,
            },
            3 => Record::Purge(dec.list(|d| d.u64())?),
            _ => return Err(CodecError::Invalid("unknown journal record")),
        })
    }
}

/// A journal entry plus its replayed state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LiveEntry {
    pub entry: JournalEntry,
    pub final_digest: Option<Digest>,
    /// Superseded by a later entry for the same (inode, block_index).
    pub dropped: bool,
}

impl LiveEntry {
    pub fn is_pending(&self) -> bool {
        self.final_digest.is_none() && !self.dropped
    }
}

#[derive(Clone, Copy, Debug)]
pub struct JournalOptions {
    /// fsync after every enqueue batch and state change.
    pub sync: bool,
    pub coalesce: bool,
}

impl Default for JournalOptions {
    fn default() -> Self {
        Self {
            sync: true,
            coalesce: true,
        }
    }
}

struct State {
    file: File,
    live: BTreeMap<u64, LiveEntry>,
    last_seq: u64,
    records: u64,
}

pub struct Journal {
    path: PathBuf,
    opts: JournalOptions,
    state: Mutex<State>,
}

fn frame(rec: &Record) -> Vec<u8> {
    let payload = rec.encode();
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Well-formed records from the front of `raw`, and where they end.
fn parse(raw: &[u8]) -> (Vec<Record>, usize) {
    let mut out = Vec::new();
    let mut pos = 0usize;
    while raw.len() - pos >= 8 {
        let len = u32::from_le_bytes(raw[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(raw[pos + 4..pos + 8].try_into().unwrap());
        let start = pos + 8;
        if raw.len() - start < len || crc32fast::hash(&raw[start..start + len]) != crc {
            break;
        }
        match Record::decode(&raw[start..start + len]) {
            Ok(r) => out.push(r),
            Err(_) => break,
        }
        pos = start + len;
    }
    (out, pos)
}

fn fold(records: Vec<Record>) -> (BTreeMap<u64, LiveEntry>, u64) {
    let mut live = BTreeMap::new();
    let mut last_seq = 0;
    for r in records {
        match r {
            Record::Entry(e) => {
                last_seq = last_seq.max(e.seq);
                live.insert(
                    e.seq,
                    LiveEntry {
                        entry: e,
                        final_digest: None,
                        dropped: false,
                    },
                );
            }
            Record::Committed { seq, digest } => {
                if let Some(l) = live.get_mut(&seq) {
                    l.final_digest = Some(digest);
                }
            }
            Record::Purge(seqs) => {
                for s in seqs {
                    live.remove(&s);
                }
            }
        }
    }
    // An inode entry that committed finishes its whole group: everything
    // before it for that inode is obsolete.
    let mut done: HashMap<InodeNumber, u64> = HashMap::new();
    for l in live.values() {
        if l.entry.is_inode() && l.final_digest.is_some() {
            let e = done.entry(l.entry.inode).or_default();
            *e = (*e).max(l.entry.seq);
        }
    }
    live.retain(|_, l| done.get(&l.entry.inode).is_none_or(|&s| l.entry.seq > s));
    (live, last_seq)
}

impl Journal {
    /// Open or create the journal in `dir`, replaying existing records and
    /// compacting the file down to the live entries.
    pub fn open(dir: &Path, opts: JournalOptions) -> Result<Self, JournalError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(JOURNAL_FILE);
        let mut raw = Vec::new();
        if path.exists() {
            File::open(&path)?.read_to_end(&mut raw)?;
        }
        let (records, good) = parse(&raw);
        if good < raw.len() {
            warn!("dropping {} torn bytes from {}", raw.len() - good, path.display());
        }
        let (live, last_seq) = fold(records);

        let tmp = dir.join(format!("{JOURNAL_FILE}.tmp"));
        let mut out = File::create(&tmp)?;
        let mut records = 0;
        for l in live.values() {
            out.write_all(&frame(&Record::Entry(l.entry.clone())))?;
            records += 1;
            if let Some(d) = l.final_digest {
                out.write_all(&frame(&Record::Committed {
                    seq: l.entry.seq,
                    digest: d,
                }))?;
                records += 1;
            }
        }
        out.sync_all()?;
        drop(out);
        std::fs::rename(&tmp, &path)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        let journal = Self {
            path,
            opts,
            state: Mutex::new(State {
                file,
                live,
                last_seq,
                records,
            }),
        };
        Ok(journal)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn options(&self) -> JournalOptions {
        self.opts
    }

    fn persist(&self, st: &mut State, recs: &[Record]) -> Result<(), JournalError> {
        let mut buf = Vec::new();
        for r in recs {
            buf.extend_from_slice(&frame(r));
        }
        st.file.write_all(&buf)?;
        if self.opts.sync {
            st.file.sync_data()?;
        }
        st.records += recs.len() as u64;
        Ok(())
    }

    pub fn last_seq(&self) -> u64 {
        self.state.lock().unwrap().last_seq
    }

    /// Durably append entries whose sequence numbers the caller chose.
    /// Sequences must strictly increase. All or nothing: a failed write
    /// leaves no entry enqueued.
    pub fn enqueue(&self, entries: Vec<JournalEntry>) -> Result<(), JournalError> {
        let mut st = self.state.lock().unwrap();
        let mut last = st.last_seq;
        for e in &entries {
            if e.seq <= last {
                return Err(JournalError::Sequence { seq: e.seq, last });
            }
            last = e.seq;
        }
        let recs: Vec<Record> = entries.iter().cloned().map(Record::Entry).collect();
        self.persist(&mut st, &recs)?;
        st.last_seq = last;
        for e in entries {
            st.live.insert(
                e.seq,
                LiveEntry {
                    entry: e,
                    final_digest: None,
                    dropped: false,
                },
            );
        }
        Ok(())
    }

    /// Assign sequence numbers under the journal lock, then enqueue.
    /// `build` receives the first free sequence number.
    pub fn enqueue_with<T>(
        &self,
        build: impl FnOnce(u64) -> Result<(Vec<JournalEntry>, T), JournalError>,
    ) -> Result<T, JournalError> {
        let mut st = self.state.lock().unwrap();
        let (entries, out) = build(st.last_seq + 1)?;
        let mut last = st.last_seq;
        for e in &entries {
            if e.seq <= last {
                return Err(JournalError::Sequence { seq: e.seq, last });
            }
            last = e.seq;
        }
        let recs: Vec<Record> = entries.iter().cloned().map(Record::Entry).collect();
        self.persist(&mut st, &recs)?;
        st.last_seq = last;
        for e in entries {
            st.live.insert(
                e.seq,
                LiveEntry {
                    entry: e,
                    final_digest: None,
                    dropped: false,
                },
            );
        }
        Ok(out)
    }

    pub fn mark_committed(&self, seq: u64, digest: Digest) -> Result<(), JournalError> {
        let mut st = self.state.lock().unwrap();
        if !st.live.contains_key(&seq) {
            return Err(JournalError::UnknownSequence(seq));
        }
        self.persist(&mut st, &[Record::Committed { seq, digest }])?;
        st.live.get_mut(&seq).unwrap().final_digest = Some(digest);
        Ok(())
    }

    pub fn purge(&self, seqs: &[u64]) -> Result<(), JournalError> {
        if seqs.is_empty() {
            return Ok(());
        }
        let mut st = self.state.lock().unwrap();
        self.persist(&mut st, &[Record::Purge(seqs.to_vec())])?;
        for s in seqs {
            st.live.remove(s);
        }
        if st.live.is_empty() && st.records > 1024 {
            st.file.set_len(0)?;
            st.file.sync_all()?;
            st.records = 0;
        }
        Ok(())
    }

    /// Mark superseded entries dropped: among pending entries sharing
    /// (inode, block_index) only the latest survives. Surviving inode
    /// entries have references to dropped placeholders rewritten to the
    /// survivor at the same position, and inherit the dropped entries'
    /// change bits. Returns the number of entries dropped.
    pub fn coalesce(&self) -> usize {
        if !self.opts.coalesce {
            return 0;
        }
        let mut st = self.state.lock().unwrap();
        let mut latest: HashMap<(InodeNumber, u64), u64> = HashMap::new();
        for (seq, l) in &st.live {
            if l.is_pending() {
                latest.insert((l.entry.inode, l.entry.block_index), *seq);
            }
        }
        let mut dropped_changes: HashMap<InodeNumber, u8> = HashMap::new();
        let mut rewrites: HashMap<(InodeNumber, u64), Digest> = HashMap::new();
        let mut superseded: HashMap<(InodeNumber, u64), Vec<Digest>> = HashMap::new();
        let mut count = 0;
        for (seq, l) in st.live.iter_mut() {
            if !l.is_pending() {
                continue;
            }
            let key = (l.entry.inode, l.entry.block_index);
            if latest[&key] != *seq {
                l.dropped = true;
                count += 1;
                if l.entry.is_inode() {
                    *dropped_changes.entry(l.entry.inode).or_default() |= l.entry.changes;
                } else {
                    superseded.entry(key).or_default().push(l.entry.placeholder);
                }
            } else if !l.entry.is_inode() {
                rewrites.insert(key, l.entry.placeholder);
            }
        }
        for seq in latest.values() {
            let l = st.live.get_mut(seq).unwrap();
            if !l.entry.is_inode() {
                continue;
            }
            let n = l.entry.inode;
            l.entry.changes |= dropped_changes.get(&n).copied().unwrap_or(0);
            if let BlockBody::Inode(b) = &mut l.entry.body.body {
                for (idx, h) in b.data_hashes.iter_mut().enumerate() {
                    let key = (n, idx as u64);
                    if superseded.get(&key).is_some_and(|v| v.contains(h)) {
                        if let Some(r) = rewrites.get(&key) {
                            *h = *r;
                        }
                    }
                }
            }
        }
        count
    }

    /// Every live entry in sequence order.
    pub fn entries(&self) -> Vec<LiveEntry> {
        self.state.lock().unwrap().live.values().cloned().collect()
    }

    pub fn entries_for(&self, inode: InodeNumber) -> Vec<LiveEntry> {
        self.state
            .lock()
            .unwrap()
            .live
            .values()
            .filter(|l| l.entry.inode == inode)
            .cloned()
            .collect()
    }

    pub fn pending_count(&self) -> usize {
        self.state
            .lock()
            .unwrap()
            .live
            .values()
            .filter(|l| l.is_pending())
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.state.lock().unwrap().live.is_empty()
    }

    /// Latest live inode entry for `inode`, committed or not.
    pub fn latest_inode(&self, inode: InodeNumber) -> Option<LiveEntry> {
        self.state
            .lock()
            .unwrap()
            .live
            .values()
            .rev()
            .find(|l| l.entry.inode == inode && l.entry.is_inode() && !l.dropped)
            .cloned()
    }

    /// Inodes with pending inode entries, ordered by their first live entry.
    pub fn inodes_in_order(&self) -> Vec<InodeNumber> {
        let st = self.state.lock().unwrap();
        let mut seen = Vec::new();
        for l in st.live.values() {
            if !seen.contains(&l.entry.inode) {
                seen.push(l.entry.inode);
            }
        }
        seen
    }

    /// Payload of a data entry, by placeholder or final digest.
    pub fn data_payload(&self, digest: &Digest) -> Option<Vec<u8>> {
        let st = self.state.lock().unwrap();
        st.live.values().rev().find_map(|l| {
            if l.entry.is_inode() {
                return None;
            }
            if l.entry.placeholder == *digest || l.final_digest == Some(*digest) {
                l.entry.body.body.as_data().map(|d| d.payload.clone())
            } else {
                None
            }
        })
    }

    /// Final digest recorded for the latest committed data entry at
    /// `(inode, idx)` with the given placeholder and a sequence before `before`.
    pub fn resolve(&self, inode: InodeNumber, idx: u64, placeholder: &Digest, before: u64) -> Option<Digest> {
        let st = self.state.lock().unwrap();
        st.live
            .range(..before)
            .rev()
            .find(|(_, l)| {
                l.entry.inode == inode && l.entry.block_index == idx && l.entry.placeholder == *placeholder
            })
            .and_then(|(_, l)| l.final_digest)
    }

    /// Swap in a rebased body. In memory only: replay rebases again.
    pub fn replace_body(&self, seq: u64, body: CfsBlock) -> Result<(), JournalError> {
        let mut st = self.state.lock().unwrap();
        let l = st.live.get_mut(&seq).ok_or(JournalError::UnknownSequence(seq))?;
        l.entry.body = body;
        Ok(())
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Content-addressed LRU cache of verified block plaintexts.
//!
//! Keys are block digests and values are the bytes that hash to them, so
//! every entry is self-verifying. Memory evictions spill to an optional disk
//! tier of files named by the digest's hex form.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use log::warn;
use lru::LruCache;

use crate::crypto::{hash, Digest};

pub const DEFAULT_MEMORY_BLOCKS: usize = 1024;
pub const DEFAULT_DISK_BLOCKS: usize = 8192;

#[derive(Clone, Debug)]
pub struct CacheConfig {
    pub memory_blocks: usize,
    pub disk_blocks: usize,
    /// Disk tier location; `None` disables it.
    pub disk_dir: Option<PathBuf>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            memory_blocks: DEFAULT_MEMORY_BLOCKS,
            disk_blocks: DEFAULT_DISK_BLOCKS,
            disk_dir: None,
        }
    }
}

#[derive(Default, Debug)]
pub struct CacheStats {
    pub memory_hits: AtomicU64,
    pub disk_hits: AtomicU64,
    pub misses: AtomicU64,
}

struct DiskTier {
    dir: PathBuf,
    index: Mutex<LruCache<Digest, ()>>,
}

impl DiskTier {
    fn open(dir: &Path, capacity: NonZeroUsize) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut found = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(d) = name.to_str().and_then(|n| Digest::from_hex(n).ok()) else {
                continue;
            };
            let mtime = entry.metadata()?.modified()?;
            found.push((mtime, d));
        }
        found.sort();
        let mut index = LruCache::new(capacity);
        for (_, d) in found {
            if let Some((old, ())) = index.push(d, ()) {
                if old != d {
                    let _ = std::fs::remove_file(dir.join(old.to_hex()));
                }
            }
        }
        Ok(Self {
            dir: dir.to_owned(),
            index: Mutex::new(index),
        })
    }

    fn path(&self, d: &Digest) -> PathBuf {
        self.dir.join(d.to_hex())
    }

    fn get(&self, d: &Digest) -> Option<Vec<u8>> {
        if self.index.lock().unwrap().get(d).is_none() {
            return None;
        }
        match std::fs::read(self.path(d)) {
            Ok(bytes) if hash(&bytes) == *d => Some(bytes),
            _ => {
                warn!("dropping unreadable or corrupt cache file {}", d.short());
                self.index.lock().unwrap().pop(d);
                let _ = std::fs::remove_file(self.path(d));
                None
            }
        }
    }

    fn put(&self, d: Digest, bytes: &[u8]) {
        let tmp = self.dir.join(format!("{}.tmp", d.to_hex()));
        if let Err(e) = std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, self.path(&d))) {
            warn!("cache spill failed: {e}");
            return;
        }
        if let Some((old, ())) = self.index.lock().unwrap().push(d, ()) {
            if old != d {
                let _ = std::fs::remove_file(self.path(&old));
            }
        }
    }

    fn len(&self) -> usize {
        self.index.lock().unwrap().len()
    }
}

pub struct BlockCache {
    memory: Mutex<LruCache<Digest, Arc<Vec<u8>>>>,
    disk: Option<DiskTier>,
    pub stats: CacheStats,
}

impl BlockCache {
    pub fn new(config: &CacheConfig) -> std::io::Result<Self> {
        let mem_cap = NonZeroUsize::new(config.memory_blocks.max(1)).unwrap();
        let disk = match (&config.disk_dir, NonZeroUsize::new(config.disk_blocks)) {
            (Some(dir), Some(cap)) => Some(DiskTier::open(dir, cap)?),
            _ => None,
        };
        Ok(Self {
            memory: Mutex::new(LruCache::new(mem_cap)),
            disk,
            stats: CacheStats::default(),
        })
    }

    pub fn memory_only(blocks: usize) -> Self {
        Self::new(&CacheConfig {
            memory_blocks: blocks,
            disk_blocks: 0,
            disk_dir: None,
        })
        .expect("no disk tier to open")
    }

    pub fn get(&self, digest: &Digest) -> Option<Arc<Vec<u8>>> {
        if let Some(v) = self.memory.lock().unwrap().get(digest) {
            self.stats.memory_hits.fetch_add(1, Ordering::Relaxed);
            return Some(Arc::clone(v));
        }
        if let Some(bytes) = self.disk.as_ref().and_then(|d| d.get(digest)) {
            self.stats.disk_hits.fetch_add(1, Ordering::Relaxed);
            let bytes = Arc::new(bytes);
            self.insert_memory(*digest, Arc::clone(&bytes));
            return Some(bytes);
        }
        self.stats.misses.fetch_add(1, Ordering::Relaxed);
        None
    }

    /// Cache `bytes` under `digest`. Bytes that do not hash to the key are
    /// refused.
    pub fn insert(&self, digest: Digest, bytes: Vec<u8>) -> bool {
        if hash(&bytes) != digest {
            return false;
        }
        self.insert_memory(digest, Arc::new(bytes));
        true
    }

    fn insert_memory(&self, digest: Digest, bytes: Arc<Vec<u8>>) {
        let evicted = self.memory.lock().unwrap().push(digest, bytes);
        if let (Some((old, v)), Some(disk)) = (evicted, &self.disk) {
            if old != digest {
                disk.put(old, &v);
            }
        }
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.memory.lock().unwrap().contains(digest)
    }

    pub fn memory_len(&self) -> usize {
        self.memory.lock().unwrap().len()
    }

    pub fn disk_len(&self) -> usize {
        self.disk.as_ref().map_or(0, DiskTier::len)
    }

    pub fn clear_memory(&self) {
        self.memory.lock().unwrap().clear();
    }
}

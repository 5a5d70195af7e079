// SPDX-License-Identifier: Apache-2.0

//! Per-block read and write latency, reported as a 10% trimmed mean.

use std::time::Instant;

use serde::Serialize;

use super::{HarnessError, Stack, StackOptions, UserSpec};
use crate::block::{InodeKind, ROOT_INODE};
use crate::crypto::Scheme;

pub const MIN_TRIALS: usize = 20;
pub const TRIM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchOp {
    Read,
    Write,
}

impl BenchOp {
    pub fn name(self) -> &'static str {
        match self {
            BenchOp::Read => "read",
            BenchOp::Write => "write",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub op: BenchOp,
    pub sizes: Vec<usize>,
    pub crypto: bool,
    /// Reads only: time a repeat read served by the block cache.
    pub cached: bool,
    pub trials: usize,
    pub block_size: usize,
    /// Fsync the client journal on every record.
    pub sync_journal: bool,
}

impl BenchConfig {
    pub fn new(op: BenchOp, crypto: bool) -> Self {
        Self {
            op,
            sizes: default_sizes(),
            crypto,
            cached: false,
            trials: MIN_TRIALS,
            block_size: 512,
            sync_journal: false,
        }
    }
}

/// 64 KiB to 1 MiB, doubling.
pub fn default_sizes() -> Vec<usize> {
    (0..5).map(|i| (64 << 10) << i).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchSample {
    pub op: BenchOp,
    pub size: usize,
    pub crypto: bool,
    pub cached: bool,
    pub trial: usize,
    pub ns_per_block: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub op: BenchOp,
    pub size: usize,
    pub crypto: bool,
    pub cached: bool,
    pub blocks: usize,
    pub trimmed_ns_per_block: f64,
    pub trimmed_total_ns: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub samples: Vec<BenchSample>,
}

impl BenchReport {
    pub fn merge(&mut self, other: BenchReport) {
        self.rows.extend(other.rows);
        self.samples.extend(other.samples);
    }

    /// Largest over smallest per-block latency among matching rows.
    pub fn spread(&self, op: BenchOp, crypto: bool, cached: bool) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.op == op && r.crypto == crypto && r.cached == cached)
            .map(|r| r.trimmed_ns_per_block)
            .collect();
        let max = v.iter().copied().fold(f64::MIN, f64::max);
        let min = v.iter().copied().fold(f64::MAX, f64::min);
        max / min
    }

    /// Total time strictly increases with size among matching rows.
    pub fn totals_monotone(&self, op: BenchOp, crypto: bool, cached: bool) -> bool {
        let mut v: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter(|r| r.op == op && r.crypto == crypto && r.cached == cached)
            .map(|r| (r.size, r.trimmed_total_ns))
            .collect();
        v.sort_by_key(|(s, _)| *s);
        v.windows(2).all(|w| w[1].1 > w[0].1)
    }

    /// Mean per-block latency across sizes for one configuration.
    pub fn mean_ns_per_block(&self, op: BenchOp, crypto: bool, cached: bool) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.op == op && r.crypto == crypto && r.cached == cached)
            .map(|r| r.trimmed_ns_per_block)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("op,size,crypto,cached,trial,ns_per_block\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{},{:.1}\n",
                s.op.name(),
                s.size,
                if s.crypto { "on" } else { "off" },
                s.cached,
                s.trial,
                s.ns_per_block
            ));
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<6} {:>9} {:>6} {:>7} {:>7} {:>16} {:>14}\n",
            "op", "size", "crypto", "cached", "blocks", "ns/block (trim)", "total ms"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<6} {:>9} {:>6} {:>7} {:>7} {:>16.0} {:>14.3}\n",
                r.op.name(),
                r.size,
                if r.crypto { "on" } else { "off" },
                r.cached,
                r.blocks,
                r.trimmed_ns_per_block,
                r.trimmed_total_ns / 1e6
            ));
        }
        out
    }
}

/// Mean after discarding the lowest and highest `fraction` of samples.
pub fn trimmed_mean(samples: &[f64], fraction: f64) -> f64 {
    assert!(!samples.is_empty(), "trimmed mean of no samples");
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let cut = (v.len() as f64 * fraction).floor() as usize;
    let kept = &v[cut..v.len() - cut];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn pattern(size: usize, salt: usize) -> Vec<u8> {
    (0..size).map(|i| (i.wrapping_mul(31) ^ salt) as u8).collect()
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, HarnessError> {
    if cfg.trials < MIN_TRIALS {
        return Err(HarnessError::Invalid(format!(
            "at least {MIN_TRIALS} trials are needed, got {}",
            cfg.trials
        )));
    }
    if cfg.op == BenchOp::Write && cfg.cached {
        return Err(HarnessError::Invalid("cached applies to reads only".into()));
    }
    let stack = Stack::boot(StackOptions {
        scheme: if cfg.crypto { Scheme::Ed25519 } else { Scheme::Null },
        block_size: cfg.block_size,
        users: vec![UserSpec::member("bench", 1000)],
        audit: false,
        ..StackOptions::default()
    })?;
    let mut config = stack.client_config();
    config.journal.sync = cfg.sync_journal;
    config.bypass_cache = cfg.op == BenchOp::Read && !cfg.cached;
    config.cache.memory_blocks = (cfg.sizes.iter().max().copied().unwrap_or(0) / cfg.block_size + 16).max(1024);
    let client = stack.mount("bench", "bench", config)?;
    let uid = 1000;
    let mut report = BenchReport::default();
    for (si, &size) in cfg.sizes.iter().enumerate() {
        let blocks = size.div_ceil(cfg.block_size);
        let mut per_block = Vec::with_capacity(cfg.trials);
        let mut totals = Vec::with_capacity(cfg.trials);
        let read_target = if cfg.op == BenchOp::Read {
            let f = client.create(ROOT_INODE, &format!("r{si}"), InodeKind::File, uid)?;
            client.write(f, 0, &pattern(size, si), uid)?;
            client.flush()?;
            if cfg.cached {
                client.read_all(f)?;
            }
            Some(f)
        } else {
            None
        };
        for trial in 0..cfg.trials {
            let elapsed = match read_target {
                Some(f) => {
                    let t = Instant::now();
                    let data = client.read_all(f)?;
                    let e = t.elapsed();
                    if data.len() != size {
                        return Err(HarnessError::Invalid("short read during benchmark".into()));
                    }
                    e
                }
                None => {
                    let f = client.create(ROOT_INODE, &format!("w{si}-{trial}"), InodeKind::File, uid)?;
                    client.flush()?;
                    let data = pattern(size, trial);
                    let t = Instant::now();
                    client.write(f, 0, &data, uid)?;
                    client.flush()?;
                    t.elapsed()
                }
            };
            let ns = elapsed.as_nanos() as f64;
            totals.push(ns);
            per_block.push(ns / blocks as f64);
            report.samples.push(BenchSample {
                op: cfg.op,
                size,
                crypto: cfg.crypto,
                cached: cfg.cached,
                trial,
                ns_per_block: ns / blocks as f64,
            });
        }
        report.rows.push(BenchRow {
            op: cfg.op,
            size,
            crypto: cfg.crypto,
            cached: cfg.cached,
            blocks,
            trimmed_ns_per_block: trimmed_mean(&per_block, TRIM),
            trimmed_total_ns: trimmed_mean(&totals, TRIM),
        });
    }
    Ok(report)
}

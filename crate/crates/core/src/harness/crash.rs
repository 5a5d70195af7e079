// SPDX-License-Identifier: Apache-2.0

//! Crash recovery: acknowledged writes survive a client dying anywhere
//! between the journal append and the final inode commit.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{HarnessError, Stack, StackOptions, UserSpec};
use crate::block::{InodeKind, InodeNumber, ROOT_INODE};
use crate::client::{CrashPlan, FsError};

#[derive(Clone, Debug, Default, Serialize)]
pub struct CrashReport {
    pub seed: u64,
    pub crash_points: usize,
    pub crashes: usize,
    pub acknowledged_writes: usize,
    pub mismatches: Vec<String>,
}

/// One trial: `points` rounds of writes, each ended by a crash mid-flush.
pub fn run_crash_trial(seed: u64, points: usize) -> Result<CrashReport, HarnessError> {
    let stack = Stack::boot(StackOptions {
        block_size: 64,
        users: vec![UserSpec::member("writer", 1000), UserSpec::member("reader", 2000)],
        ..StackOptions::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: BTreeMap<InodeNumber, Vec<u8>> = BTreeMap::new();
    let mut report = CrashReport {
        seed,
        crash_points: points,
        ..CrashReport::default()
    };
    let uid = 1000;
    for round in 0..points {
        let c = stack.mount("writer", "writer", stack.client_config())?;
        c.sync()?;
        if model.len() < 3 && (model.is_empty() || rng.gen_bool(0.5)) {
            let f = c.create(ROOT_INODE, &format!("file{round}"), InodeKind::File, uid)?;
            model.insert(f, Vec::new());
        }
        for _ in 0..rng.gen_range(1..6) {
            let files: Vec<_> = model.keys().copied().collect();
            let f = files[rng.gen_range(0..files.len())];
            let content = model.get_mut(&f).unwrap();
            let off = rng.gen_range(0..=content.len() + 30);
            let len = rng.gen_range(1..160);
            let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            c.write(f, off as u64, &data, uid)?;
            if content.len() < off + len {
                content.resize(off + len, 0);
            }
            content[off..off + len].copy_from_slice(&data);
            report.acknowledged_writes += 1;
        }
        c.set_crash_plan(CrashPlan {
            stop_after_puts: Some(rng.gen_range(0..12)),
            crash_after_ack: rng.gen_bool(0.5),
        });
        match c.flush() {
            Err(FsError::Crashed) => report.crashes += 1,
            Ok(_) => {}
            Err(e) => return Err(e.into()),
        }
        // The client is gone; only its journal remains.
        drop(c);
    }
    let c = stack.mount("writer", "writer", stack.client_config())?;
    let r = c.flush()?;
    for (n, why) in r.failures {
        report.mismatches.push(format!("inode {n}: {why}"));
    }
    if c.pending() != 0 {
        report.mismatches.push(format!("{} entries still pending", c.pending()));
    }
    let reader = stack.mount_default("reader")?;
    for (f, want) in &model {
        match reader.read_all(*f) {
            Ok(got) if got == *want => {}
            Ok(got) => report
                .mismatches
                .push(format!("inode {f}: {} bytes on server, expected {}", got.len(), want.len())),
            Err(e) => report.mismatches.push(format!("inode {f}: {e}")),
        }
    }
    Ok(report)
}

// SPDX-License-Identifier: Apache-2.0

//! Attack scenarios. Each injects a fault at a byte boundary of a live
//! stack and reports where, if anywhere, it was stopped.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use super::{HarnessError, Stack, StackOptions, UserSpec};
use crate::block::{build_cfs_block, BlockBody, CfsBlock, InodeKind, ROOT_INODE};
use crate::client::FsError;
use crate::codec::Canonical;
use crate::crypto::KeyPair;
use crate::middleware::{MiddlewarePolicy, PutRequest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Body replaced in transit, original signature kept.
    MitmBody,
    /// Body replaced and re-signed by a key outside the ACL.
    MitmBodyAndSig,
    /// Server returns substituted bytes.
    DishonestServer,
    /// A member's key leaks and is then revoked.
    LeakedKey,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::MitmBody,
        AttackKind::MitmBodyAndSig,
        AttackKind::DishonestServer,
        AttackKind::LeakedKey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::MitmBody => "mitm_body",
            AttackKind::MitmBodyAndSig => "mitm_body_and_sig",
            AttackKind::DishonestServer => "dishonest_server",
            AttackKind::LeakedKey => "leaked_key",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s.replace('-', "_"))
    }

    pub fn expected(self) -> &'static str {
        match self {
            AttackKind::MitmBody => "rejected_by_middleware:bad-signature",
            AttackKind::MitmBodyAndSig => "rejected_by_middleware:forbidden",
            AttackKind::DishonestServer => "rejected_by_client",
            AttackKind::LeakedKey => "rejected_after_revocation",
        }
    }

    /// The defence a scenario depends on, by name, and the middleware
    /// policy with it switched off. Without a middleware defence the
    /// fault itself is withheld instead.
    pub fn weakened_policy(self) -> Option<(&'static str, MiddlewarePolicy)> {
        let mut p = MiddlewarePolicy::default();
        let name = match self {
            AttackKind::MitmBody => {
                p.verify_signatures = false;
                "verify_signatures"
            }
            AttackKind::MitmBodyAndSig => {
                p.enforce_acl = false;
                "enforce_acl"
            }
            AttackKind::LeakedKey => {
                p.enforce_revocation = false;
                "enforce_revocation"
            }
            AttackKind::DishonestServer => return None,
        };
        Some((name, p))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub expected: &'static str,
    pub observed: String,
    pub pass: bool,
    pub detail: String,
    /// Admitted blocks the redundant auditor flags, if any.
    pub audit_violations: usize,
    pub millis: u128,
}

fn stack_for(base: &StackOptions) -> Result<Stack, HarnessError> {
    let mut opts = base.clone();
    opts.users = vec![UserSpec::member("alice", 1000), UserSpec::member("bob", 2000)];
    Stack::boot(opts)
}

/// Run one scenario on a fresh stack built from `base`.
pub fn run_attack(kind: AttackKind, base: &StackOptions) -> Result<AttackReport, HarnessError> {
    run_attack_with(kind, base, true)
}

fn run_attack_with(kind: AttackKind, base: &StackOptions, inject: bool) -> Result<AttackReport, HarnessError> {
    let start = Instant::now();
    let stack = stack_for(base)?;
    let (observed, detail) = match kind {
        AttackKind::MitmBody => mitm(&stack, None)?,
        AttackKind::MitmBodyAndSig => {
            let mallory = KeyPair::generate(stack.options.scheme);
            mitm(&stack, Some(mallory))?
        }
        AttackKind::DishonestServer => dishonest_server(&stack, inject)?,
        AttackKind::LeakedKey => leaked_key(&stack)?,
    };
    Ok(AttackReport {
        kind,
        expected: kind.expected(),
        pass: observed == kind.expected(),
        observed,
        detail,
        audit_violations: stack.audit.violation_count(),
        millis: start.elapsed().as_millis(),
    })
}

pub fn run_all(base: &StackOptions) -> Result<Vec<AttackReport>, HarnessError> {
    AttackKind::ALL.iter().map(|k| run_attack(*k, base)).collect()
}

/// Replace data payloads in every PUT; re-sign with `resign` if given.
fn mitm(stack: &Stack, resign: Option<KeyPair>) -> Result<(String, String), HarnessError> {
    let alice = stack.mount_default("alice")?;
    let f = alice.create(ROOT_INODE, "report.txt", InodeKind::File, 1000)?;
    alice.write(f, 0, b"quarterly numbers: fine", 1000)?;
    alice.flush()?;

    let resign = resign.map(Arc::new);
    stack.set_put_tamper(Some(Arc::new(move |bytes: &mut Vec<u8>| {
        let Ok(mut req) = PutRequest::decode(bytes) else { return };
        let Ok(mut block) = CfsBlock::decode(&req.block) else { return };
        let BlockBody::Data(d) = &mut block.body else { return };
        d.payload = b"quarterly numbers: ruinous".to_vec();
        if let Some(key) = &resign {
            let author = crate::block::Identity::new(*key.public(), block.author.uid);
            block = build_cfs_block(block.body, author, key).expect("author uses the attacker key");
        }
        req.block = block.encode();
        *bytes = req.encode();
    })));
    alice.write(f, 0, b"quarterly numbers: good", 1000)?;
    let report = alice.flush()?;
    stack.set_put_tamper(None);

    let observed = match report.failures.iter().find(|(n, _)| *n == f) {
        Some((_, why)) if why.contains("bad-signature") => "rejected_by_middleware:bad-signature".to_string(),
        Some((_, why)) if why.contains("forbidden") => "rejected_by_middleware:forbidden".to_string(),
        Some((_, why)) => format!("rejected_by_middleware:other({why})"),
        None => "admitted".to_string(),
    };
    let bob = stack.mount_default("bob")?;
    let content = bob.read_all(f).map_err(|e| e.to_string());
    Ok((observed, format!("content seen by another client: {content:?}")))
}

/// Swap the bytes of one stored data block for another valid block.
fn dishonest_server(stack: &Stack, inject: bool) -> Result<(String, String), HarnessError> {
    let alice = stack.mount_default("alice")?;
    let a = alice.create(ROOT_INODE, "a.txt", InodeKind::File, 1000)?;
    let b = alice.create(ROOT_INODE, "b.txt", InodeKind::File, 1000)?;
    alice.write(a, 0, b"alpha", 1000)?;
    alice.write(b, 0, b"bravo", 1000)?;
    alice.flush()?;

    let cache = alice.inode_cache();
    let block_of = |n| {
        cache
            .view()
            .live(n)
            .and_then(|e| e.block.data_hashes.first().copied())
            .ok_or_else(|| HarnessError::Invalid(format!("inode {n} has no data")))
    };
    let (target, donor) = (block_of(a)?, block_of(b)?);
    let store = stack.data_store();
    let (donor_bytes, _) = store.get(&donor)?;
    store.set_read_tamper(Some(Arc::new(move |d, bytes: &mut Vec<u8>| {
        if inject && *d == target {
            *bytes = donor_bytes.clone();
        }
    })));

    let bob = stack.mount_default("bob")?;
    let attacked = bob.read_all(a);
    let survives = bob.readdir(ROOT_INODE).map(|e| e.len()) == Ok(2) && bob.read_all(b).as_deref() == Ok(&b"bravo"[..]);
    store.set_read_tamper(None);
    let observed = match &attacked {
        Err(FsError::Integrity(_)) if survives => "rejected_by_client".to_string(),
        Err(FsError::Integrity(_)) => "rejected_by_client:mount-degraded".to_string(),
        Err(e) => format!("error({e})"),
        Ok(data) if data == b"alpha" => "substitution-not-applied".to_string(),
        Ok(_) => "accepted_substituted_data".to_string(),
    };
    Ok((observed, format!("read result: {attacked:?}; mount usable afterwards: {survives}")))
}

/// The leaked key works until revoked, then fails at the middleware.
fn leaked_key(stack: &Stack) -> Result<(String, String), HarnessError> {
    let alice = stack.mount_default("alice")?;
    let f = alice.create(ROOT_INODE, "ledger", InodeKind::File, 1000)?;
    alice.write(f, 0, b"balance: 100", 1000)?;
    alice.flush()?;

    let thief = stack.mount("alice", "thief", stack.client_config())?;
    thief.write(f, 0, b"balance: 0  ", 1000)?;
    let before = thief.flush()?;
    if !before.failures.is_empty() {
        return Ok(("leak-unusable".into(), format!("{:?}", before.failures)));
    }
    stack.revoke("alice", true)?;
    thief.sync()?;
    // The scrub may already lock the thief out locally; bypass that.
    let mut cfg = stack.client_config();
    cfg.advisory_checks = false;
    let thief = stack.mount("alice", "thief2", cfg)?;
    thief.write(f, 0, b"balance: -1 ", 1000)?;
    let after = thief.flush()?;
    let observed = match after.failures.iter().find(|(n, _)| *n == f) {
        Some((_, why)) if why.contains("revoked") => "rejected_after_revocation".to_string(),
        Some((_, why)) => format!("rejected_other({why})"),
        None => "admitted".to_string(),
    };
    Ok((observed, format!("post-revocation flush: {:?}", after.failures)))
}

/// Result of re-running a scenario with its protecting check disabled.
#[derive(Clone, Debug, Serialize)]
pub struct MutationReport {
    pub kind: AttackKind,
    pub weakened: String,
    /// True when the weakened stack lets the attack through, as it must.
    pub detected: bool,
    pub observed: String,
}

pub fn mutation_test(base: &StackOptions) -> Result<Vec<MutationReport>, HarnessError> {
    let mut out = Vec::new();
    for kind in AttackKind::ALL {
        let (weakened, r) = match kind.weakened_policy() {
            Some((name, policy)) => {
                let mut opts = base.clone();
                opts.policy = policy;
                (name, run_attack(kind, &opts)?)
            }
            None => ("fault withheld", run_attack_with(kind, base, false)?),
        };
        out.push(MutationReport {
            kind,
            weakened: weakened.into(),
            detected: !r.pass,
            observed: r.observed,
        });
    }
    Ok(out)
}

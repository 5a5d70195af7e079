// SPDX-License-Identifier: Apache-2.0

//! Server-side redundant verification. Installed on the capsule stores, it
//! re-checks every admitted block against its own shadow of the inode
//! state, independently of the middleware, and counts blocks that should
//! never have been admitted.

use std::collections::HashSet;
use std::sync::Mutex;

use crate::block::{acl_permits, open_block, BlockBody, Identity, SealedBlock, ROOT_INODE};
use crate::codec::Canonical;
use crate::crypto::{CapsuleReadKey, Digest};
use crate::server::AdmissionAudit;
use crate::view::InodeView;

#[derive(Default)]
struct AuditState {
    view: InodeView,
    revoked: HashSet<Digest>,
    examined: u64,
    violations: Vec<String>,
}

pub struct ShadowAudit {
    inode_capsule: Digest,
    inode_key: CapsuleReadKey,
    data_capsule: Digest,
    data_key: CapsuleReadKey,
    admin: Identity,
    state: Mutex<AuditState>,
}

impl ShadowAudit {
    pub fn new(
        inode_capsule: Digest,
        inode_key: CapsuleReadKey,
        data_capsule: Digest,
        data_key: CapsuleReadKey,
        admin: Identity,
    ) -> Self {
        Self {
            inode_capsule,
            inode_key,
            data_capsule,
            data_key,
            admin,
            state: Mutex::new(AuditState::default()),
        }
    }

    pub fn note_revoked(&self, key_id: Digest) {
        self.state.lock().unwrap().revoked.insert(key_id);
    }

    pub fn examined(&self) -> u64 {
        self.state.lock().unwrap().examined
    }

    /// Number of admitted blocks that fail the redundant checks.
    pub fn violation_count(&self) -> usize {
        self.state.lock().unwrap().violations.len()
    }

    pub fn violations(&self) -> Vec<String> {
        self.state.lock().unwrap().violations.clone()
    }

    pub fn view_digests(&self) -> std::collections::HashMap<u64, Digest> {
        self.state.lock().unwrap().view.digests()
    }

    fn check(&self, st: &mut AuditState, capsule: &Digest, block: &SealedBlock) -> Result<(), String> {
        let key = if *capsule == self.inode_capsule {
            &self.inode_key
        } else if *capsule == self.data_capsule {
            &self.data_key
        } else {
            return Err("block for an unknown capsule".into());
        };
        let opened = open_block(key, &block.encode(), &block.digest).map_err(|e| format!("does not open: {e}"))?;
        let inner = &opened.outer.inner;
        let author = inner.author;
        let is_admin = author == self.admin;
        if !is_admin && st.revoked.contains(&author.key.key_id()) {
            return Err("authored by a revoked key".into());
        }
        match &inner.body {
            BlockBody::Inode(b) => {
                if *capsule != self.inode_capsule {
                    return Err("inode block in the data capsule".into());
                }
                if b.updated_by != author {
                    return Err("updated_by differs from the signer".into());
                }
                let prior = st.view.get(b.inode_number).cloned();
                match &prior {
                    Some(p) => {
                        if b.version_of != Some(p.digest()) {
                            return Err(format!("inode {} version is not based on the current one", b.inode_number));
                        }
                        if p.block.kind != b.kind {
                            return Err("inode kind changed".into());
                        }
                        if !is_admin && !acl_permits(&p.block.acl, &author) {
                            return Err(format!("author not in the ACL of inode {}", b.inode_number));
                        }
                        if b.parent_inode != p.block.parent_inode && !is_admin {
                            let ok = st
                                .view
                                .live(b.parent_inode)
                                .is_some_and(|np| np.block.is_dir() && acl_permits(&np.block.acl, &author));
                            if !ok {
                                return Err("move into a directory the author cannot write".into());
                            }
                        }
                    }
                    None => {
                        if b.version_of.is_some() {
                            return Err("first version names a predecessor".into());
                        }
                        if b.inode_number == ROOT_INODE {
                            if !is_admin {
                                return Err("root created by a non-admin".into());
                            }
                        } else {
                            let ok = st
                                .view
                                .live(b.parent_inode)
                                .is_some_and(|p| p.block.is_dir() && (is_admin || acl_permits(&p.block.acl, &author)));
                            if !ok {
                                return Err("create in a directory the author cannot write".into());
                            }
                        }
                    }
                }
                st.view.offer(block.digest, opened.outer.timestamp, b.clone());
            }
            BlockBody::Data(_) => {
                if *capsule != self.data_capsule {
                    return Err("data block in the inode capsule".into());
                }
                // Data blocks do not name their inode; the author must at
                // least be able to write some live file.
                let ok = st
                    .view
                    .inodes()
                    .any(|e| !e.block.deleted && !e.block.is_dir() && acl_permits(&e.block.acl, &author));
                if !ok {
                    return Err("data authored by someone who can write no file".into());
                }
            }
        }
        Ok(())
    }
}

impl AdmissionAudit for ShadowAudit {
    fn admitted(&self, capsule: &Digest, block: &SealedBlock) {
        let mut st = self.state.lock().unwrap();
        st.examined += 1;
        if let Err(why) = self.check(&mut st, capsule, block) {
            log::error!("audit: block {} should not have been admitted: {why}", block.digest.short());
            st.violations.push(format!("{}: {why}", block.digest.short()));
        }
    }
}

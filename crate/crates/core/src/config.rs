// SPDX-License-Identifier: Apache-2.0

//! TOML configuration, one file per role.
//!
//! Relative paths inside a file are resolved against the directory that
//! holds it, so a deployment directory can be moved as a unit.
//!
//! ```toml
//! # capsule.toml
//! listen = "127.0.0.1:7400"
//! store_dir = "store"
//!
//! [[capsule]]
//! name = "inodes"
//! block_size = 512
//! writer_key = "keys/inodes.pub"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::{Uid, DEFAULT_BLOCK_SIZE, DEFAULT_NOBODY_UID};
use crate::block_cache::{CacheConfig, DEFAULT_DISK_BLOCKS, DEFAULT_MEMORY_BLOCKS};
use crate::client::ClientConfig;
use crate::crypto::{CryptoError, Digest, PublicKey};
use crate::journal::JournalOptions;
use crate::middleware::MiddlewarePolicy;
use crate::server::CapsuleMetadata;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
    #[error(transparent)]
    Key(#[from] CryptoError),
}

fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_owned(),
        source,
    })
}

fn save_toml<T: Serialize>(value: &T, path: &Path) -> Result<(), ConfigError> {
    let text = toml::to_string_pretty(value).expect("config types serialize");
    std::fs::write(path, text).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_owned).unwrap_or_default()
}

fn parse_digest(path: &Path, field: &str, hex: &str) -> Result<Digest, ConfigError> {
    Digest::from_hex(hex).map_err(|e| ConfigError::Invalid {
        path: path.to_owned(),
        msg: format!("{field}: {e}"),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct CapsuleEntry {
    pub name: String,
    pub block_size: u32,
    /// Public key file that verifies seals and signed roots.
    pub writer_key: PathBuf,
    #[serde(default)]
    pub nonce: u64,
    /// Checked against the id derived from the fields above.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capsule_id: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct CapsuleServerConfig {
    pub listen: String,
    pub store_dir: PathBuf,
    #[serde(default = "yes")]
    pub sync: bool,
    /// Replicate read-only from this leader instead of accepting appends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub follower_of: Option<String>,
    #[serde(rename = "capsule")]
    pub capsules: Vec<CapsuleEntry>,
}

fn yes() -> bool {
    true
}

impl CapsuleServerConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut c: Self = load_toml(path)?;
        let base = base_dir(path);
        c.store_dir = resolve(&base, &c.store_dir);
        for e in &mut c.capsules {
            e.writer_key = resolve(&base, &e.writer_key);
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        save_toml(self, path)
    }

    /// Metadata for every configured capsule, checking declared ids.
    pub fn metadata(&self, path: &Path) -> Result<Vec<CapsuleMetadata>, ConfigError> {
        self.capsules
            .iter()
            .map(|e| {
                let meta = CapsuleMetadata {
                    name: e.name.clone(),
                    block_size: e.block_size,
                    writer_key: PublicKey::load(&e.writer_key)?,
                    nonce: e.nonce,
                };
                if let Some(id) = &e.capsule_id {
                    if parse_digest(path, "capsule_id", id)? != meta.capsule_id() {
                        return Err(ConfigError::Invalid {
                            path: path.to_owned(),
                            msg: format!("capsule {} does not match its declared id", e.name),
                        });
                    }
                }
                Ok(meta)
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct PolicyConfig {
    #[serde(default = "yes")]
    pub verify_signatures: bool,
    #[serde(default = "yes")]
    pub enforce_revocation: bool,
    #[serde(default = "yes")]
    pub enforce_acl: bool,
    #[serde(default = "yes")]
    pub enforce_freshness: bool,
    #[serde(default = "yes")]
    pub scrub_on_revoke: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self::from(MiddlewarePolicy::default())
    }
}

impl From<MiddlewarePolicy> for PolicyConfig {
    fn from(p: MiddlewarePolicy) -> Self {
        Self {
            verify_signatures: p.verify_signatures,
            enforce_revocation: p.enforce_revocation,
            enforce_acl: p.enforce_acl,
            enforce_freshness: p.enforce_freshness,
            scrub_on_revoke: p.scrub_on_revoke,
        }
    }
}

impl From<&PolicyConfig> for MiddlewarePolicy {
    fn from(p: &PolicyConfig) -> Self {
        Self {
            verify_signatures: p.verify_signatures,
            enforce_revocation: p.enforce_revocation,
            enforce_acl: p.enforce_acl,
            enforce_freshness: p.enforce_freshness,
            scrub_on_revoke: p.scrub_on_revoke,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct MiddlewareConfig {
    pub listen: String,
    pub capsule_server: String,
    pub inode_capsule: String,
    pub data_capsule: String,
    pub inode_write_key: PathBuf,
    pub data_write_key: PathBuf,
    pub admin_key: PathBuf,
    pub revocation_list: PathBuf,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default)]
    pub policy: PolicyConfig,
}

fn default_block_size() -> usize {
    DEFAULT_BLOCK_SIZE
}

impl MiddlewareConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut c: Self = load_toml(path)?;
        let base = base_dir(path);
        for p in [
            &mut c.inode_write_key,
            &mut c.data_write_key,
            &mut c.admin_key,
            &mut c.revocation_list,
        ] {
            *p = resolve(&base, p);
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        save_toml(self, path)
    }

    pub fn capsule_ids(&self, path: &Path) -> Result<(Digest, Digest), ConfigError> {
        Ok((
            parse_digest(path, "inode_capsule", &self.inode_capsule)?,
            parse_digest(path, "data_capsule", &self.data_capsule)?,
        ))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct CacheSection {
    #[serde(default = "default_memory_blocks")]
    pub memory_blocks: usize,
    #[serde(default = "default_disk_blocks")]
    pub disk_blocks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disk_dir: Option<PathBuf>,
}

fn default_memory_blocks() -> usize {
    DEFAULT_MEMORY_BLOCKS
}

fn default_disk_blocks() -> usize {
    DEFAULT_DISK_BLOCKS
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            memory_blocks: DEFAULT_MEMORY_BLOCKS,
            disk_blocks: DEFAULT_DISK_BLOCKS,
            disk_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct MountConfig {
    pub capsule_server: String,
    pub middleware: String,
    pub inode_capsule: String,
    pub data_capsule: String,
    pub inode_read_key: PathBuf,
    pub data_read_key: PathBuf,
    pub client_key: PathBuf,
    pub uid: Uid,
    pub journal_dir: PathBuf,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default = "default_nobody")]
    pub nobody_uid: Uid,
    #[serde(default = "yes")]
    pub advisory_checks: bool,
    #[serde(default = "yes")]
    pub coalesce: bool,
    #[serde(default = "yes")]
    pub sync_journal: bool,
    #[serde(default = "default_retries")]
    pub flush_retries: usize,
    #[serde(default)]
    pub cache: CacheSection,
}

fn default_nobody() -> Uid {
    DEFAULT_NOBODY_UID
}

fn default_retries() -> usize {
    5
}

impl MountConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut c: Self = load_toml(path)?;
        let base = base_dir(path);
        for p in [
            &mut c.inode_read_key,
            &mut c.data_read_key,
            &mut c.client_key,
            &mut c.journal_dir,
        ] {
            *p = resolve(&base, p);
        }
        if let Some(d) = &mut c.cache.disk_dir {
            *d = resolve(&base, d);
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        save_toml(self, path)
    }

    pub fn capsule_ids(&self, path: &Path) -> Result<(Digest, Digest), ConfigError> {
        Ok((
            parse_digest(path, "inode_capsule", &self.inode_capsule)?,
            parse_digest(path, "data_capsule", &self.data_capsule)?,
        ))
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            block_size: self.block_size,
            nobody_uid: self.nobody_uid,
            advisory_checks: self.advisory_checks,
            bypass_cache: false,
            flush_retries: self.flush_retries,
            journal: JournalOptions {
                sync: self.sync_journal,
                coalesce: self.coalesce,
            },
            cache: CacheConfig {
                memory_blocks: self.cache.memory_blocks,
                disk_blocks: self.cache.disk_blocks,
                disk_dir: self.cache.disk_dir.clone(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mount.toml");
        std::fs::write(
            &path,
            r#"
capsule_server = "127.0.0.1:1"
middleware = "127.0.0.1:2"
inode_capsule = "00"
data_capsule = "00"
inode_read_key = "keys/i.rkey"
data_read_key = "/abs/d.rkey"
client_key = "keys/c.key"
uid = 1000
journal_dir = "journal"
"#,
        )
        .unwrap();
        let c = MountConfig::load(&path).unwrap();
        assert_eq!(c.inode_read_key, dir.path().join("keys/i.rkey"));
        assert_eq!(c.data_read_key, PathBuf::from("/abs/d.rkey"));
        assert_eq!(c.block_size, DEFAULT_BLOCK_SIZE);
        assert!(c.coalesce && c.advisory_checks);
        assert!(c.capsule_ids(&path).is_err());
        let cc = c.client_config();
        assert_eq!(cc.cache.memory_blocks, DEFAULT_MEMORY_BLOCKS);
    }

    #[test]
    fn unknown_policy_defaults_to_enforcing() {
        let p: PolicyConfig = toml::from_str("verify_signatures = false").unwrap();
        let m = MiddlewarePolicy::from(&p);
        assert!(!m.verify_signatures && m.enforce_acl && m.enforce_revocation);
    }
}

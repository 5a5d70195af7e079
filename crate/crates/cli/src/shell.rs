// SPDX-License-Identifier: Apache-2.0

//! Line-oriented shell over a mounted client, one reply per command.
//!
//! ```text
//! ls [PATH]            cat PATH              stat PATH
//! mkdir PATH           touch PATH            rm PATH
//! write PATH OFF DATA  append PATH DATA      truncate PATH SIZE
//! mv FROM TO           acl PATH KEY:UID,...  flush | sync | pending | quit
//! crash PUTS [ack]     (abort the process partway through a flush)
//! ```
//!
//! DATA is a quoted string or `blob:SIZE[:SEED]`. A write is acknowledged
//! once it is in the journal; `flush` sends it.

use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use capsulefs::block::{Acl, Identity, InodeKind, Uid};
use capsulefs::client::{Client, CrashPlan, FsError};
use capsulefs::harness::init::{mount_from_config, public_key_of};
use capsulefs::harness::workload::{data_arg, parse_size, tokenize};
use serde_json::{json, Value};

use crate::commands::{emit, CmdResult};

fn split(path: &str) -> Result<(String, String), String> {
    let trimmed = path.trim_end_matches('/');
    match trimmed.rsplit_once('/') {
        Some((dir, name)) if !name.is_empty() => {
            Ok((if dir.is_empty() { "/".into() } else { dir.into() }, name.into()))
        }
        _ => Err(format!("{path}: not a file path")),
    }
}

struct Shell {
    client: Arc<Client>,
    uid: Uid,
    base: std::path::PathBuf,
}

fn fs(e: FsError) -> String {
    e.to_string()
}

impl Shell {
    fn arg<'a>(args: &'a [String], i: usize, what: &str) -> Result<&'a str, String> {
        args.get(i).map(String::as_str).ok_or_else(|| format!("missing {what}"))
    }

    fn exec(&self, op: &str, args: &[String]) -> Result<(Value, String), String> {
        let c = &self.client;
        let uid = self.uid;
        let ok = |v: Value, t: String| Ok((v, t));
        match op {
            "ls" => {
                let path = args.first().map_or("/", String::as_str);
                let mut entries = c.readdir(c.lookup(path).map_err(fs)?).map_err(fs)?;
                entries.sort_by(|a, b| a.name.cmp(&b.name));
                let names: Vec<String> = entries
                    .iter()
                    .map(|e| format!("{}{}", e.name, if e.kind == InodeKind::Directory { "/" } else { "" }))
                    .collect();
                ok(json!({ "entries": names }), names.join("\n"))
            }
            "cat" => {
                let data = c.read_all(c.lookup(Self::arg(args, 0, "path")?).map_err(fs)?).map_err(fs)?;
                let text = String::from_utf8_lossy(&data).into_owned();
                ok(json!({ "size": data.len(), "content": text }), text)
            }
            "stat" => {
                let n = c.lookup(Self::arg(args, 0, "path")?).map_err(fs)?;
                let a = c.getattr(n).map_err(fs)?;
                let v = json!({
                    "inode": a.inode,
                    "dir": a.kind == InodeKind::Directory,
                    "size": a.size,
                    "uid": a.uid,
                    "nlink": a.nlink,
                    "mtime_us": a.mtime_us,
                    "pending": a.pending,
                    "acl": a.acl.entries().len(),
                });
                let t = format!(
                    "inode {} size {} uid {} nlink {} mtime_us {}{}",
                    a.inode,
                    a.size,
                    a.uid,
                    a.nlink,
                    a.mtime_us,
                    if a.pending { " (pending)" } else { "" }
                );
                ok(v, t)
            }
            "mkdir" | "touch" => {
                let (dir, name) = split(Self::arg(args, 0, "path")?)?;
                let kind = if op == "mkdir" { InodeKind::Directory } else { InodeKind::File };
                let n = c.create(c.lookup(&dir).map_err(fs)?, &name, kind, uid).map_err(fs)?;
                ok(json!({ "inode": n }), format!("inode {n}"))
            }
            "write" | "append" => {
                let n = c.lookup(Self::arg(args, 0, "path")?).map_err(fs)?;
                let (off, data) = if op == "write" {
                    let off = parse_size(Self::arg(args, 1, "offset")?)? as u64;
                    (off, data_arg(Self::arg(args, 2, "data")?)?)
                } else {
                    (c.getattr(n).map_err(fs)?.size, data_arg(Self::arg(args, 1, "data")?)?)
                };
                let w = c.write(n, off, &data, uid).map_err(fs)?;
                ok(json!({ "written": w, "offset": off }), format!("wrote {w} bytes at {off}"))
            }
            "truncate" => {
                let n = c.lookup(Self::arg(args, 0, "path")?).map_err(fs)?;
                let size = parse_size(Self::arg(args, 1, "size")?)? as u64;
                c.truncate(n, size, uid).map_err(fs)?;
                ok(json!({ "size": size }), format!("size {size}"))
            }
            "rm" => {
                let (dir, name) = split(Self::arg(args, 0, "path")?)?;
                c.unlink(c.lookup(&dir).map_err(fs)?, &name, uid).map_err(fs)?;
                ok(json!({}), "removed".into())
            }
            "mv" => {
                let (fd, fname) = split(Self::arg(args, 0, "source")?)?;
                let (td, tname) = split(Self::arg(args, 1, "target")?)?;
                c.rename(c.lookup(&fd).map_err(fs)?, &fname, c.lookup(&td).map_err(fs)?, &tname, uid)
                    .map_err(fs)?;
                ok(json!({}), "moved".into())
            }
            "acl" => {
                let n = c.lookup(Self::arg(args, 0, "path")?).map_err(fs)?;
                let mut ids = Vec::new();
                for item in Self::arg(args, 1, "members")?.split(',') {
                    let (file, uid) = item
                        .rsplit_once(':')
                        .ok_or_else(|| format!("member {item:?} should be KEYFILE:UID"))?;
                    let key = public_key_of(&self.base.join(file)).map_err(|e| e.to_string())?;
                    ids.push(Identity::new(key, uid.parse().map_err(|_| format!("bad uid {uid}"))?));
                }
                c.set_acl(n, Acl::new(ids), uid).map_err(fs)?;
                ok(json!({ "members": args[1].split(',').count() }), "acl updated".into())
            }
            "flush" => {
                let r = c.flush().map_err(fs)?;
                let failures: Vec<Value> = r
                    .failures
                    .iter()
                    .map(|(n, why)| json!({ "inode": n, "reason": why }))
                    .collect();
                let t = format!("{} puts, {} inodes committed, {} failures", r.puts, r.inodes_committed, failures.len());
                let v = json!({ "puts": r.puts, "inodes_committed": r.inodes_committed, "failures": failures });
                if r.failures.is_empty() {
                    ok(v, t)
                } else {
                    Err(format!("flush: {}", r.failures[0].1))
                }
            }
            "sync" => {
                let n = c.sync().map_err(fs)?;
                ok(json!({ "applied": n }), format!("{n} new versions"))
            }
            "crash" => {
                // Die mid-flush: stop after N PUTs, then abort without cleanup.
                let puts = parse_size(Self::arg(args, 0, "put count")?)? as u64;
                c.set_crash_plan(CrashPlan {
                    stop_after_puts: Some(puts),
                    crash_after_ack: args.get(1).is_some_and(|a| a == "ack"),
                });
                let _ = c.flush();
                std::process::abort();
            }
            "pending" => ok(json!({ "pending": c.pending() }), format!("{} pending", c.pending())),
            other => Err(format!("unknown command {other}")),
        }
    }
}

pub fn run(json: bool, config: &Path, snapshot: Option<u64>, flush_ms: u64, sync_ms: u64) -> CmdResult {
    let (client, cfg) = mount_from_config(config, snapshot).map_err(|e| e.to_string())?;
    let client = Arc::new(client);
    let _flusher = (flush_ms > 0 && snapshot.is_none()).then(|| client.spawn_flusher(Duration::from_millis(flush_ms)));
    let _updater = (sync_ms > 0).then(|| client.spawn_updater(Duration::from_millis(sync_ms)));
    let shell = Shell {
        client: client.clone(),
        uid: cfg.uid,
        base: config.parent().unwrap_or(Path::new(".")).to_owned(),
    };
    emit(
        json,
        &json!({ "mounted": true, "uid": cfg.uid, "read_only": client.is_read_only(), "pending": client.pending() }),
        &format!("mounted (uid {}, {} pending)", cfg.uid, client.pending()),
    );
    let mut all_ok = true;
    for line in std::io::stdin().lock().lines() {
        let line = line.map_err(|e| e.to_string())?;
        let toks = match tokenize(&line) {
            Ok(t) if t.is_empty() => continue,
            Ok(t) => t,
            Err(e) => {
                emit(json, &json!({ "ok": false, "error": e }), &format!("error: {e}"));
                continue;
            }
        };
        if toks[0] == "quit" || toks[0] == "exit" {
            break;
        }
        match shell.exec(&toks[0], &toks[1..]) {
            Ok((mut v, t)) => {
                v["ok"] = json!(true);
                emit(json, &v, &t);
            }
            Err(e) => {
                all_ok = false;
                emit(json, &json!({ "ok": false, "error": e }), &format!("error: {e}"));
            }
        }
    }
    drop(_flusher);
    if snapshot.is_none() {
        let r = client.flush().map_err(|e| e.to_string())?;
        all_ok &= r.failures.is_empty();
    }
    Ok(all_ok)
}

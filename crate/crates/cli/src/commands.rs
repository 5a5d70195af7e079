// SPDX-License-Identifier: Apache-2.0

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use capsulefs::block::InodeKind;
use capsulefs::codec::Canonical;
use capsulefs::config::MiddlewareConfig;
use capsulefs::crypto::{KeyPair, Scheme};
use capsulefs::harness::attack::{mutation_test, run_attack, AttackKind};
use capsulefs::harness::bench::{run_bench, BenchConfig, BenchOp, BenchReport};
use capsulefs::harness::corpus::{self, CorpusEntry};
use capsulefs::harness::init::{
    init_fs, mount_from_config, open_capsule_server, public_key_of, start_middleware, InitOptions,
};
use capsulefs::harness::workload::{parse_size, run_workload_text, Runner, Script, UserDecl};
use capsulefs::harness::{StackOptions, Transport, UserSpec};
use capsulefs::journal::{Journal, JournalOptions};
use capsulefs::middleware::RevokeRequest;
use capsulefs::net::{Handlers, NetServer, RemoteService};
use capsulefs::server::run_follower;
use capsulefs::service::WriteService;
use serde_json::{json, Value};

use crate::{Cli, Command, JournalAction, OpChoice, Toggle};

pub type CmdResult = Result<bool, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Print `value` as JSON or `text`, whichever the user asked for.
pub fn emit(json: bool, value: &Value, text: &str) {
    let mut out = std::io::stdout().lock();
    if json {
        let _ = writeln!(out, "{value}");
    } else {
        let _ = writeln!(out, "{text}");
    }
    let _ = out.flush();
}

pub fn run(cli: &Cli) -> CmdResult {
    let json = cli.json;
    match &cli.command {
        Command::Init {
            dir,
            block_size,
            no_crypto,
            force,
            users,
            capsule_listen,
            middleware_listen,
        } => {
            let mut opts = InitOptions {
                block_size: *block_size,
                scheme: Scheme::from_crypto_enabled(!no_crypto),
                force: *force,
                capsule_listen: capsule_listen.clone(),
                middleware_listen: middleware_listen.clone(),
                ..InitOptions::default()
            };
            if !users.is_empty() {
                opts.users = users.iter().map(|u| parse_user(u)).collect::<Result<_, _>>()?;
            }
            std::fs::create_dir_all(dir).map_err(err)?;
            let s = init_fs(dir, &opts).map_err(err)?;
            let text = format!(
                "initialized {}\n  inode capsule {}\n  data capsule  {}\n  root          {}",
                s.dir.display(),
                s.inode_capsule,
                s.data_capsule,
                s.root
            );
            emit(json, &serde_json::to_value(&s).map_err(err)?, &text);
            Ok(true)
        }
        Command::ServeCapsule { config, listen } => serve_capsule(json, config, listen.clone()),
        Command::Middleware { config, listen } => serve_middleware(json, config, listen.clone()),
        Command::Mount {
            config,
            snapshot,
            script,
            flush_interval_ms,
            sync_interval_ms,
        } => {
            if let Some(script) = script {
                return workload(json, script, Some(config), false);
            }
            crate::shell::run(json, config, *snapshot, *flush_interval_ms, *sync_interval_ms)
        }
        Command::AttackSim { kind, tcp, mutation } => attack(json, kind, *tcp, *mutation),
        Command::Bench {
            op,
            crypto,
            cached,
            sizes,
            trials,
            block_size,
            csv,
        } => bench(json, *op, *crypto, *cached, sizes.as_deref(), *trials, *block_size, csv.as_deref()),
        Command::Workload { script, config, tcp } => workload(json, script, config.as_deref(), *tcp),
        Command::Snapshot { config, ts, path } => snapshot(json, config, *ts, path.as_deref()),
        Command::Journal {
            action: JournalAction::Inspect { dir },
        } => journal_inspect(json, dir),
        Command::Revoke { config, key, scrub } => revoke(json, config, key, *scrub),
        Command::Corpus {
            seed,
            count,
            out,
            check,
        } => corpus_cmd(json, *seed, *count, out.as_deref(), check.as_deref()),
    }
}

fn parse_user(s: &str) -> Result<UserSpec, String> {
    let (name, uid) = s
        .split_once(':')
        .ok_or_else(|| format!("user {s:?} should be NAME:UID"))?;
    let uid = uid.parse().map_err(|_| format!("bad uid in {s:?}"))?;
    Ok(UserSpec::member(name, uid))
}

fn serve_capsule(json: bool, config: &Path, listen: Option<String>) -> CmdResult {
    let (server, stores, cfg) = open_capsule_server(config).map_err(err)?;
    let addr = listen.unwrap_or_else(|| cfg.listen.clone());
    let stop = Arc::new(AtomicBool::new(false));
    if let Some(leader) = &cfg.follower_of {
        for store in stores.clone() {
            let leader = RemoteService::new(leader.as_str()).map_err(err)?;
            let stop = stop.clone();
            thread::spawn(move || {
                if let Err(e) = run_follower(&store, &leader, &|| stop.load(Ordering::Relaxed)) {
                    log::error!("replication of {} stopped: {e}", store.metadata().name);
                }
            });
        }
    }
    let ns = NetServer::bind(
        addr.as_str(),
        Handlers {
            capsules: Some(server),
            writer: None,
        },
    )
    .map_err(|e| format!("bind {addr}: {e}"))?;
    let capsules: Vec<Value> = stores
        .iter()
        .map(|s| json!({ "name": s.metadata().name, "id": s.id().to_hex(), "blocks": s.len() }))
        .collect();
    emit(
        json,
        &json!({ "role": "capsule", "listen": ns.local_addr().to_string(), "capsules": capsules }),
        &format!("capsule server listening on {}", ns.local_addr()),
    );
    ns.wait();
    stop.store(true, Ordering::Relaxed);
    Ok(true)
}

fn serve_middleware(json: bool, config: &Path, listen: Option<String>) -> CmdResult {
    let (mw, cfg) = start_middleware(config).map_err(err)?;
    let addr = listen.unwrap_or_else(|| cfg.listen.clone());
    let ns = NetServer::bind(
        addr.as_str(),
        Handlers {
            capsules: None,
            writer: Some(Arc::new(mw)),
        },
    )
    .map_err(|e| format!("bind {addr}: {e}"))?;
    emit(
        json,
        &json!({ "role": "middleware", "listen": ns.local_addr().to_string() }),
        &format!("middleware listening on {}", ns.local_addr()),
    );
    ns.wait();
    Ok(true)
}

fn attack(json: bool, kind: &str, tcp: bool, mutation: bool) -> CmdResult {
    let kinds: Vec<AttackKind> = if kind == "all" {
        AttackKind::ALL.to_vec()
    } else {
        vec![AttackKind::from_name(kind).ok_or_else(|| {
            let names: Vec<_> = AttackKind::ALL.iter().map(|k| k.name()).collect();
            format!("unknown attack {kind:?}; expected one of {} or all", names.join(", "))
        })?]
    };
    let base = StackOptions {
        transport: if tcp { Transport::Tcp } else { Transport::InProcess },
        ..StackOptions::default()
    };
    let mut pass = true;
    let mut reports = Vec::new();
    for k in kinds {
        let r = run_attack(k, &base).map_err(err)?;
        pass &= r.pass && r.audit_violations == 0;
        if !json {
            println!(
                "{:<18} {}  expected {:<38} observed {} ({} ms)",
                k.name(),
                if r.pass { "PASS" } else { "FAIL" },
                r.expected,
                r.observed,
                r.millis
            );
        }
        reports.push(serde_json::to_value(&r).map_err(err)?);
    }
    let mut mutations = Vec::new();
    if mutation {
        for m in mutation_test(&base).map_err(err)? {
            pass &= m.detected;
            if !json {
                println!(
                    "mutation {:<18} weakened {:<20} {}",
                    m.kind.name(),
                    m.weakened,
                    if m.detected { "detected" } else { "NOT DETECTED" }
                );
            }
            mutations.push(serde_json::to_value(&m).map_err(err)?);
        }
    }
    if json {
        println!("{}", json!({ "pass": pass, "attacks": reports, "mutations": mutations }));
    }
    Ok(pass)
}

#[allow(clippy::too_many_arguments)]
fn bench(
    json: bool,
    op: OpChoice,
    crypto: Toggle,
    cached: bool,
    sizes: Option<&str>,
    trials: usize,
    block_size: usize,
    csv: Option<&Path>,
) -> CmdResult {
    let sizes = match sizes {
        Some(s) => s.split(',').map(parse_size).collect::<Result<Vec<_>, _>>()?,
        None => capsulefs::harness::bench::default_sizes(),
    };
    let ops = match op {
        OpChoice::Read => vec![BenchOp::Read],
        OpChoice::Write => vec![BenchOp::Write],
        OpChoice::Both => vec![BenchOp::Read, BenchOp::Write],
    };
    let cryptos = match crypto {
        Toggle::On => vec![true],
        Toggle::Off => vec![false],
        Toggle::Both => vec![true, false],
    };
    let mut report = BenchReport::default();
    for &o in &ops {
        for &c in &cryptos {
            let mut variants = vec![false];
            if o == BenchOp::Read && cached {
                variants.push(true);
            }
            for cached in variants {
                let mut cfg = BenchConfig::new(o, c);
                cfg.sizes = sizes.clone();
                cfg.trials = trials;
                cfg.block_size = block_size;
                cfg.cached = cached;
                report.merge(run_bench(&cfg).map_err(err)?);
            }
        }
    }
    if let Some(path) = csv {
        std::fs::write(path, report.to_csv()).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    let mut ratios = serde_json::Map::new();
    let mut text = report.table();
    if cryptos.len() == 2 {
        for &o in &ops {
            let ratio = report.mean_ns_per_block(o, true, false) / report.mean_ns_per_block(o, false, false);
            text.push_str(&format!("{} crypto on/off per-block ratio: {ratio:.2}\n", o.name()));
            ratios.insert(o.name().into(), json!(ratio));
        }
    }
    for &o in &ops {
        for &c in &cryptos {
            text.push_str(&format!(
                "{} crypto {}: per-block spread {:.2}x, totals monotone: {}\n",
                o.name(),
                if c { "on" } else { "off" },
                report.spread(o, c, false),
                report.totals_monotone(o, c, false)
            ));
        }
    }
    emit(
        json,
        &json!({ "rows": report.rows, "crypto_ratio": ratios }),
        text.trim_end(),
    );
    Ok(true)
}

/// Mount file for a declared user: `mount-<name>.toml` next to `config`,
/// else `config` itself.
fn mount_file_for(config: &Path, name: &str) -> PathBuf {
    let sibling = config
        .parent()
        .unwrap_or(Path::new("."))
        .join(format!("mount-{name}.toml"));
    if sibling.exists() {
        sibling
    } else {
        config.to_owned()
    }
}

fn workload(json: bool, script: &Path, config: Option<&Path>, tcp: bool) -> CmdResult {
    let text = std::fs::read_to_string(script).map_err(|e| format!("{}: {e}", script.display()))?;
    let report = match config {
        None => run_workload_text(&text, if tcp { Transport::Tcp } else { Transport::InProcess }).map_err(err)?,
        Some(config) => {
            let parsed = Script::parse(&text).map_err(err)?;
            let mount = |u: &UserDecl| {
                mount_from_config(&mount_file_for(config, &u.name), None)
                    .map(|(c, _)| c)
                    .map_err(|e| capsulefs::client::FsError::Mount(e.to_string()))
            };
            Runner::new(parsed, &mount).run()
        }
    };
    let text = match &report.failure {
        None => format!("PASS {} ops in {} ms", report.ops, report.millis),
        Some(f) => format!("FAIL at line {} `{}`: {}", f.line, f.op, f.message),
    };
    emit(json, &serde_json::to_value(&report).map_err(err)?, &text);
    Ok(report.pass)
}

fn snapshot(json: bool, config: &Path, ts: u64, path: Option<&str>) -> CmdResult {
    let (client, _) = mount_from_config(config, Some(ts)).map_err(err)?;
    let path = path.unwrap_or("/");
    let n = client.lookup(path).map_err(err)?;
    let attr = client.getattr(n).map_err(err)?;
    if attr.kind == InodeKind::Directory {
        let mut entries = client.readdir(n).map_err(err)?;
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        let names: Vec<_> = entries
            .iter()
            .map(|e| json!({ "name": e.name, "inode": e.inode, "dir": e.kind == InodeKind::Directory }))
            .collect();
        let text: Vec<String> = entries
            .iter()
            .map(|e| format!("{}{}", e.name, if e.kind == InodeKind::Directory { "/" } else { "" }))
            .collect();
        emit(json, &json!({ "ts": ts, "path": path, "entries": names }), &text.join("\n"));
    } else {
        let data = client.read_all(n).map_err(err)?;
        emit(
            json,
            &json!({ "ts": ts, "path": path, "size": data.len(), "content": String::from_utf8_lossy(&data) }),
            &String::from_utf8_lossy(&data),
        );
    }
    Ok(true)
}

fn journal_inspect(json: bool, dir: &Path) -> CmdResult {
    if !dir.is_dir() {
        return Err(format!("{} is not a journal directory", dir.display()));
    }
    let j = Journal::open(
        dir,
        JournalOptions {
            sync: false,
            coalesce: false,
        },
    )
    .map_err(err)?;
    let entries = j.entries();
    let rows: Vec<Value> = entries
        .iter()
        .map(|l| {
            json!({
                "seq": l.entry.seq,
                "inode": l.entry.inode,
                "block": if l.entry.is_inode() { Value::Null } else { json!(l.entry.block_index) },
                "changes": l.entry.changes,
                "placeholder": l.entry.placeholder.to_hex(),
                "final": l.final_digest.map(|d| d.to_hex()),
                "dropped": l.dropped,
            })
        })
        .collect();
    let mut text = format!(
        "{} entries, {} pending, last seq {}\n",
        entries.len(),
        j.pending_count(),
        j.last_seq()
    );
    for l in &entries {
        let state = if l.dropped {
            "dropped".to_string()
        } else {
            l.final_digest.map_or("pending".into(), |d| format!("committed {}", d.short()))
        };
        let what = if l.entry.is_inode() {
            format!("inode changes={:#04x}", l.entry.changes)
        } else {
            format!("data block {}", l.entry.block_index)
        };
        text.push_str(&format!("{:>6} inode {:<20} {:<24} {}\n", l.entry.seq, l.entry.inode, what, state));
    }
    emit(
        json,
        &json!({ "entries": rows, "pending": j.pending_count(), "last_seq": j.last_seq() }),
        text.trim_end(),
    );
    Ok(true)
}

fn revoke(json: bool, config: &Path, key: &Path, scrub: bool) -> CmdResult {
    let cfg = MiddlewareConfig::load(config).map_err(err)?;
    let admin = KeyPair::load(&cfg.admin_key).map_err(err)?;
    let target = public_key_of(key).map_err(err)?;
    let req = RevokeRequest::sign(target.key_id(), scrub, &admin);
    let remote = RemoteService::new(cfg.listen.as_str()).map_err(|e| format!("middleware {}: {e}", cfg.listen))?;
    let scrubbed = remote.revoke(&req.encode()).map_err(err)?;
    emit(
        json,
        &json!({ "revoked": target.key_id().to_hex(), "scrubbed_inodes": scrubbed }),
        &format!("revoked {} ({} ACLs scrubbed)", target.key_id().short(), scrubbed),
    );
    Ok(true)
}

fn corpus_cmd(json: bool, seed: u64, count: usize, out: Option<&Path>, check: Option<&Path>) -> CmdResult {
    if let Some(path) = check {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let theirs: Vec<CorpusEntry> = text
            .lines()
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let r = corpus::check(seed, &theirs);
        let text = format!(
            "{} entries, {} byte mismatches, {} bad signatures",
            r.entries,
            r.byte_mismatches.len(),
            r.bad_signatures.len()
        );
        emit(json, &serde_json::to_value(&r).map_err(err)?, &text);
        return Ok(r.pass());
    }
    let entries = corpus::generate(seed, count);
    let mut body = String::new();
    for e in &entries {
        body.push_str(&serde_json::to_string(e).map_err(err)?);
        body.push('\n');
    }
    match out {
        Some(p) => {
            std::fs::write(p, body).map_err(|e| format!("{}: {e}", p.display()))?;
            emit(
                json,
                &json!({ "entries": entries.len(), "out": p }),
                &format!("wrote {} entries to {}", entries.len(), p.display()),
            );
        }
        None => print!("{body}"),
    }
    Ok(true)
}

// SPDX-License-Identifier: Apache-2.0

//! Declarative workload scripts.
//!
//! One operation per line; `#` starts a comment. A leading `@name` picks
//! the client (default: the first declared user). Every operation takes an
//! optional trailing `expect=ok|denied|notfound|exists|notempty`.
//!
//! ```text
//! user alice uid=1000
//! user bob uid=2000
//! user eve uid=3000 outsider no-advisory
//! @alice create /notes.txt
//! @alice write /notes.txt 0 "hello\n"
//! @alice write /big 0 blob:188k:7
//! @alice flush
//! @bob verify /notes.txt
//! @bob owner /notes.txt nobody
//! @eve chown /notes.txt eve expect=denied
//! @alice crash-recover 1
//! ```
//!
//! Operations: `create`, `mkdir`, `write PATH OFF DATA`, `append PATH DATA`,
//! `truncate PATH SIZE`, `read PATH OFF LEN`, `verify PATH`,
//! `owner PATH UID|nobody|self`, `chown PATH USER[,USER...]`, `unlink`,
//! `rename PATH NEWPATH`, `flush`, `sync`, `crash-recover [PUTS]`, `exists`,
//! `missing`. DATA is a quoted string or `blob:SIZE[:SEED]` where SIZE may
//! end in `k` or `m`.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{HarnessError, Stack, StackOptions, Transport, UserSpec};
use crate::block::{Acl, Identity, InodeKind, Uid};
use crate::client::{Client, CrashPlan, FsError};
use crate::crypto::PublicKey;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserDecl {
    pub name: String,
    pub uid: Uid,
    pub member: bool,
    pub advisory: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Line {
    pub number: usize,
    pub client: Option<String>,
    pub op: String,
    pub args: Vec<String>,
    pub expect: Expect,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    Ok,
    Denied,
    NotFound,
    Exists,
    NotEmpty,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Script {
    pub users: Vec<UserDecl>,
    pub lines: Vec<Line>,
}

#[derive(Clone, Debug, Serialize)]
pub struct WorkloadFailure {
    pub line: usize,
    pub op: String,
    pub message: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct WorkloadReport {
    pub ops: usize,
    pub pass: bool,
    pub failure: Option<WorkloadFailure>,
    pub millis: u128,
    /// `(line, layer)` for every denial that was expected and observed.
    pub denials: Vec<(usize, &'static str)>,
}

/// Whitespace-separated tokens; a quoted token keeps a leading `"` marker.
pub fn tokenize(line: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        if c == '#' {
            break;
        }
        let mut tok = String::new();
        if c == '"' {
            chars.next();
            tok.push('"');
            loop {
                match chars.next() {
                    None => return Err("unterminated string".into()),
                    Some('"') => break,
                    Some('\\') => match chars.next() {
                        Some('n') => tok.push('\n'),
                        Some('t') => tok.push('\t'),
                        Some(o @ ('"' | '\\')) => tok.push(o),
                        other => return Err(format!("bad escape {other:?}")),
                    },
                    Some(o) => tok.push(o),
                }
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                tok.push(c);
                chars.next();
            }
        }
        out.push(tok);
    }
    Ok(out)
}

pub fn parse_size(s: &str) -> Result<usize, String> {
    let s = s.trim().to_ascii_lowercase();
    let (num, mul) = match s.strip_suffix('k') {
        Some(n) => (n, 1 << 10),
        None => match s.strip_suffix('m') {
            Some(n) => (n, 1 << 20),
            None => (s.as_str(), 1),
        },
    };
    num.parse::<usize>()
        .map(|n| n * mul)
        .map_err(|_| format!("bad size {s:?}"))
}

impl Script {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut script = Script::default();
        for (i, raw) in text.lines().enumerate() {
            let number = i + 1;
            let err = |m: String| HarnessError::Invalid(format!("line {number}: {m}"));
            let mut toks = tokenize(raw).map_err(err)?;
            if toks.is_empty() {
                continue;
            }
            if toks[0] == "user" {
                if !script.lines.is_empty() {
                    return Err(err("users must be declared before operations".into()));
                }
                let name = toks.get(1).ok_or_else(|| err("user needs a name".into()))?.clone();
                let mut decl = UserDecl {
                    name,
                    uid: 1000 + script.users.len() as Uid,
                    member: true,
                    advisory: true,
                };
                for t in &toks[2..] {
                    match t.as_str() {
                        "outsider" => decl.member = false,
                        "no-advisory" => decl.advisory = false,
                        t if t.starts_with("uid=") => {
                            decl.uid = t[4..].parse().map_err(|_| err(format!("bad uid {t}")))?;
                        }
                        t => return Err(err(format!("unknown user option {t}"))),
                    }
                }
                script.users.push(decl);
                continue;
            }
            let client = match toks[0].strip_prefix('@') {
                Some(name) => {
                    let name = name.to_owned();
                    toks.remove(0);
                    Some(name)
                }
                None => None,
            };
            let mut expect = Expect::Ok;
            if let Some(last) = toks.last().and_then(|t| t.strip_prefix("expect=")) {
                expect = match last {
                    "ok" => Expect::Ok,
                    "denied" => Expect::Denied,
                    "notfound" => Expect::NotFound,
                    "exists" => Expect::Exists,
                    "notempty" => Expect::NotEmpty,
                    o => return Err(err(format!("unknown expectation {o}"))),
                };
                toks.pop();
            }
            if toks.is_empty() {
                return Err(err("missing operation".into()));
            }
            let op = toks.remove(0);
            script.lines.push(Line {
                number,
                client,
                op,
                args: toks,
                expect,
                text: raw.trim().to_owned(),
            });
        }
        if script.users.is_empty() {
            script.users.push(UserDecl {
                name: "main".into(),
                uid: 1000,
                member: true,
                advisory: true,
            });
        }
        Ok(script)
    }
}

/// Bytes for a quoted string or `blob:SIZE[:SEED]` token.
pub fn data_arg(s: &str) -> Result<Vec<u8>, String> {
    if let Some(text) = s.strip_prefix('"') {
        return Ok(text.as_bytes().to_vec());
    }
    if let Some(spec) = s.strip_prefix("blob:") {
        let mut parts = spec.splitn(2, ':');
        let size = parse_size(parts.next().unwrap_or(""))?;
        let seed = parts
            .next()
            .map(|p| p.parse::<u64>().map_err(|_| format!("bad seed {p}")))
            .transpose()?
            .unwrap_or(0);
        let mut buf = vec![0u8; size];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut buf);
        return Ok(buf);
    }
    Err(format!("data must be a quoted string or blob:SIZE[:SEED], got {s}"))
}

fn split_path(path: &str) -> Result<(String, String), String> {
    let trimmed = path.trim_end_matches('/');
    let (dir, name) = trimmed.rsplit_once('/').unwrap_or(("", trimmed));
    if name.is_empty() {
        return Err(format!("{path} names no file"));
    }
    Ok((if dir.is_empty() { "/".into() } else { dir.into() }, name.into()))
}

/// Mounts (and re-mounts after a crash) the client for a declared user.
pub type Mounter<'a> = dyn Fn(&UserDecl) -> Result<Client, FsError> + 'a;

pub struct Runner<'a> {
    script: Script,
    mount: &'a Mounter<'a>,
    keys: HashMap<String, PublicKey>,
    clients: HashMap<String, Client>,
    model: BTreeMap<String, Vec<u8>>,
    denials: Vec<(usize, &'static str)>,
}

enum Outcome {
    Done,
    Denied(&'static str),
}

impl<'a> Runner<'a> {
    pub fn new(script: Script, mount: &'a Mounter<'a>) -> Self {
        Self {
            script,
            mount,
            keys: HashMap::new(),
            clients: HashMap::new(),
            model: BTreeMap::new(),
            denials: Vec::new(),
        }
    }

    fn decl(&self, name: &str) -> Result<UserDecl, String> {
        self.script
            .users
            .iter()
            .find(|u| u.name == name)
            .cloned()
            .ok_or_else(|| format!("undeclared user {name}"))
    }

    fn client(&mut self, name: &str) -> Result<&Client, String> {
        if !self.clients.contains_key(name) {
            let decl = self.decl(name)?;
            let c = (self.mount)(&decl).map_err(|e| format!("mount for {name}: {e}"))?;
            self.keys.insert(name.into(), *c.keypair().public());
            self.clients.insert(name.into(), c);
        }
        Ok(&self.clients[name])
    }

    fn identity_of(&mut self, name: &str) -> Result<Identity, String> {
        let uid = self.decl(name)?.uid;
        self.client(name)?;
        Ok(Identity::new(self.keys[name], uid))
    }

    pub fn run(mut self) -> WorkloadReport {
        let start = Instant::now();
        let lines = self.script.lines.clone();
        let mut failure = None;
        for line in &lines {
            let who = line
                .client
                .clone()
                .unwrap_or_else(|| self.script.users[0].name.clone());
            let res = self.exec(&who, line);
            let verdict = match (line.expect, res) {
                (Expect::Ok, Ok(Outcome::Done)) => Ok(()),
                (Expect::Denied, Ok(Outcome::Denied(layer))) => {
                    self.denials.push((line.number, layer));
                    Ok(())
                }
                (Expect::Denied, Err(FsOrMsg::Fs(FsError::PermissionDenied))) => {
                    self.denials.push((line.number, "client"));
                    Ok(())
                }
                (Expect::NotFound, Err(FsOrMsg::Fs(FsError::NotFound)))
                | (Expect::Exists, Err(FsOrMsg::Fs(FsError::Exists)))
                | (Expect::NotEmpty, Err(FsOrMsg::Fs(FsError::NotEmpty))) => Ok(()),
                (e, Ok(Outcome::Done)) => Err(format!("expected {e:?} but the operation succeeded")),
                (_, Ok(Outcome::Denied(layer))) => Err(format!("denied by the {layer}")),
                (_, Err(FsOrMsg::Fs(e))) => Err(e.to_string()),
                (_, Err(FsOrMsg::Msg(m))) => Err(m),
            };
            if let Err(message) = verdict {
                failure = Some(WorkloadFailure {
                    line: line.number,
                    op: line.text.clone(),
                    message,
                });
                break;
            }
        }
        WorkloadReport {
            ops: lines.len(),
            pass: failure.is_none(),
            failure,
            millis: start.elapsed().as_millis(),
            denials: self.denials,
        }
    }

    fn arg<'l>(line: &'l Line, i: usize) -> Result<&'l str, FsOrMsg> {
        line.args
            .get(i)
            .map(String::as_str)
            .ok_or_else(|| FsOrMsg::Msg(format!("{} needs argument {}", line.op, i + 1)))
    }

    fn num(line: &Line, i: usize) -> Result<u64, FsOrMsg> {
        let s = Self::arg(line, i)?;
        parse_size(s).map(|n| n as u64).map_err(FsOrMsg::Msg)
    }

    fn exec(&mut self, who: &str, line: &Line) -> Result<Outcome, FsOrMsg> {
        let uid = self.decl(who).map_err(FsOrMsg::Msg)?.uid;
        match line.op.as_str() {
            "crash-recover" => {
                let puts = match line.args.first() {
                    Some(_) => Self::num(line, 0)?,
                    None => 0,
                };
                let c = self.client(who).map_err(FsOrMsg::Msg)?;
                c.set_crash_plan(CrashPlan {
                    stop_after_puts: Some(puts),
                    crash_after_ack: false,
                });
                match c.flush() {
                    Ok(_) | Err(FsError::Crashed) => {}
                    Err(e) => return Err(FsOrMsg::Fs(e)),
                }
                self.clients.remove(who);
                self.client(who).map_err(FsOrMsg::Msg)?;
                return Ok(Outcome::Done);
            }
            "chown" => {
                let path = Self::arg(line, 0)?.to_owned();
                let names: Vec<String> = Self::arg(line, 1)?.split(',').map(str::to_owned).collect();
                let mut acl = Vec::new();
                for n in &names {
                    acl.push(self.identity_of(n).map_err(FsOrMsg::Msg)?);
                }
                let c = self.client(who).map_err(FsOrMsg::Msg)?;
                c.sync()?;
                let n = c.lookup(&path)?;
                c.set_acl(n, Acl::new(acl), uid)?;
                let r = c.flush()?;
                return Ok(match r.failures.iter().find(|(i, _)| *i == n) {
                    Some((_, why)) if why.contains("forbidden") => Outcome::Denied("middleware"),
                    Some((_, why)) => return Err(FsOrMsg::Msg(format!("chown failed: {why}"))),
                    None => Outcome::Done,
                });
            }
            _ => {}
        }
        self.client(who).map_err(FsOrMsg::Msg)?;
        let c = &self.clients[who];
        match line.op.as_str() {
            "create" | "mkdir" => {
                let (dir, name) = split_path(Self::arg(line, 0)?).map_err(FsOrMsg::Msg)?;
                let parent = c.lookup(&dir)?;
                let kind = if line.op == "mkdir" { InodeKind::Directory } else { InodeKind::File };
                c.create(parent, &name, kind, uid)?;
                if kind == InodeKind::File {
                    self.model.insert(Self::arg(line, 0)?.to_owned(), Vec::new());
                }
            }
            "write" | "append" => {
                let path = Self::arg(line, 0)?.to_owned();
                let n = c.lookup(&path)?;
                let (off, data) = if line.op == "write" {
                    (Self::num(line, 1)?, data_arg(Self::arg(line, 2)?).map_err(FsOrMsg::Msg)?)
                } else {
                    (c.getattr(n)?.size, data_arg(Self::arg(line, 1)?).map_err(FsOrMsg::Msg)?)
                };
                c.write(n, off, &data, uid)?;
                let m = self.model.entry(path).or_default();
                let end = off as usize + data.len();
                if m.len() < end {
                    m.resize(end, 0);
                }
                m[off as usize..end].copy_from_slice(&data);
            }
            "truncate" => {
                let path = Self::arg(line, 0)?.to_owned();
                let size = Self::num(line, 1)?;
                let n = c.lookup(&path)?;
                c.truncate(n, size, uid)?;
                self.model.entry(path).or_default().resize(size as usize, 0);
            }
            "read" | "verify" => {
                let path = Self::arg(line, 0)?;
                c.sync()?;
                let n = c.lookup(path)?;
                let want = self
                    .model
                    .get(path)
                    .ok_or_else(|| FsOrMsg::Msg(format!("{path} was never written by this script")))?;
                let (off, len) = if line.op == "read" {
                    (Self::num(line, 1)? as usize, Self::num(line, 2)? as usize)
                } else {
                    (0, usize::MAX)
                };
                let got = c.read(n, off as u64, len as u64)?;
                let end = want.len().min(off.saturating_add(len));
                let expected = if off < end { &want[off..end] } else { &[][..] };
                if got != expected {
                    let first = got.iter().zip(expected).position(|(a, b)| a != b).unwrap_or(got.len().min(expected.len()));
                    return Err(FsOrMsg::Msg(format!(
                        "{path}: content differs at byte {} ({} bytes read, {} expected)",
                        off + first,
                        got.len(),
                        expected.len()
                    )));
                }
            }
            "owner" => {
                let path = Self::arg(line, 0)?;
                c.sync()?;
                let n = c.lookup(path)?;
                let want = match Self::arg(line, 1)? {
                    "nobody" => c.config().nobody_uid,
                    "self" => uid,
                    s => s.parse().map_err(|_| FsOrMsg::Msg(format!("bad uid {s}")))?,
                };
                let got = c.getattr(n)?.uid;
                if got != want {
                    return Err(FsOrMsg::Msg(format!("{path}: owner is {got}, expected {want}")));
                }
            }
            "unlink" => {
                let path = Self::arg(line, 0)?.to_owned();
                let (dir, name) = split_path(&path).map_err(FsOrMsg::Msg)?;
                let parent = c.lookup(&dir)?;
                c.unlink(parent, &name, uid)?;
                self.model.remove(&path);
            }
            "rename" => {
                let from = Self::arg(line, 0)?.to_owned();
                let to = Self::arg(line, 1)?.to_owned();
                let (fd, fname) = split_path(&from).map_err(FsOrMsg::Msg)?;
                let (td, tname) = split_path(&to).map_err(FsOrMsg::Msg)?;
                let (fp, tp) = (c.lookup(&fd)?, c.lookup(&td)?);
                c.rename(fp, &fname, tp, &tname, uid)?;
                if let Some(v) = self.model.remove(&from) {
                    self.model.insert(to, v);
                }
            }
            "exists" | "missing" => {
                let path = Self::arg(line, 0)?;
                c.sync()?;
                let found = c.lookup(path).is_ok();
                if found != (line.op == "exists") {
                    return Err(FsOrMsg::Msg(format!("{path}: exists = {found}")));
                }
            }
            "flush" => {
                let r = c.flush()?;
                if let Some((n, why)) = r.failures.first() {
                    if why.contains("forbidden") {
                        return Ok(Outcome::Denied("middleware"));
                    }
                    return Err(FsOrMsg::Msg(format!("flush failed for inode {n}: {why}")));
                }
            }
            "sync" => {
                c.sync()?;
            }
            other => return Err(FsOrMsg::Msg(format!("unknown operation {other}"))),
        }
        Ok(Outcome::Done)
    }
}

enum FsOrMsg {
    Fs(FsError),
    Msg(String),
}

impl From<FsError> for FsOrMsg {
    fn from(e: FsError) -> Self {
        FsOrMsg::Fs(e)
    }
}

/// Parse and run a script on a fresh stack with the declared users.
pub fn run_workload_text(text: &str, transport: Transport) -> Result<WorkloadReport, HarnessError> {
    let script = Script::parse(text)?;
    let stack = Stack::boot(StackOptions {
        transport,
        users: script
            .users
            .iter()
            .map(|u| UserSpec {
                name: u.name.clone(),
                uid: u.uid,
                member: u.member,
            })
            .collect(),
        ..StackOptions::default()
    })?;
    let mount = |u: &UserDecl| {
        let mut cfg = stack.client_config();
        cfg.advisory_checks = u.advisory;
        stack.mount(&u.name, &u.name, cfg)
    };
    Ok(Runner::new(script, &mount).run())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_handles_quotes_and_comments() {
        assert_eq!(
            tokenize(r#"@a write /f 0 "x y\n\"z" # note"#).unwrap(),
            vec!["@a", "write", "/f", "0", "\"x y\n\"z"]
        );
        assert!(tokenize("\"open").is_err());
    }

    #[test]
    fn sizes_and_blobs() {
        assert_eq!(parse_size("188k").unwrap(), 188 << 10);
        assert_eq!(parse_size("1M").unwrap(), 1 << 20);
        assert_eq!(data_arg("blob:10:3").unwrap(), data_arg("blob:10:3").unwrap());
        assert_ne!(data_arg("blob:10:3").unwrap(), data_arg("blob:10:4").unwrap());
        assert_eq!(data_arg("\"hi").unwrap(), b"hi");
    }

    #[test]
    fn empty_script_passes() {
        let r = run_workload_text("# nothing\n\n", Transport::InProcess).unwrap();
        assert!(r.pass && r.ops == 0);
    }

    #[test]
    fn blob_round_trip_and_first_divergence() {
        let ok = "create /blob\nwrite /blob 0 blob:188k:1\nflush\nverify /blob\n";
        let r = run_workload_text(ok, Transport::InProcess).unwrap();
        assert!(r.pass, "{:?}", r.failure);

        let script = Script::parse("create /a\nwrite /a 0 \"abc\"\nverify /a\nunknown-op\n").unwrap();
        assert_eq!(script.lines.len(), 4);
        let r = run_workload_text("create /a\nwrite /a 0 \"abc\"\nverify /a\nread /zzz 0 1\n", Transport::InProcess).unwrap();
        assert!(!r.pass);
        assert_eq!(r.failure.unwrap().line, 4);
    }

    #[test]
    fn users_must_come_first() {
        assert!(Script::parse("create /a\nuser bob\n").is_err());
    }
}

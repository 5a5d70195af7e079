// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Output, Stdio};

use serde_json::Value;

pub fn cfs() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cfs"))
}

pub fn run(args: &[&str]) -> Output {
    cfs().args(args).output().expect("spawn cfs")
}

pub fn json_lines(out: &[u8]) -> Vec<Value> {
    String::from_utf8_lossy(out)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("bad json {l:?}: {e}")))
        .collect()
}

pub fn free_addr() -> String {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .to_string()
}

/// A background role process, killed on drop.
pub struct Role(pub Child);

impl Drop for Role {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_role(args: &[&str]) -> Role {
    let mut child = cfs()
        .args(args)
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .expect("spawn role");
    // The first stdout line announces the bound address.
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap())
        .read_line(&mut line)
        .unwrap();
    assert!(line.contains("listen"), "role did not come up: {line:?}");
    Role(child)
}

/// An initialized deployment with both servers running as processes.
pub struct Deployment {
    pub dir: tempfile::TempDir,
    pub capsule: Role,
    pub middleware: Role,
}

impl Deployment {
    pub fn start(users: &[&str], extra: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (ca, ma) = (free_addr(), free_addr());
        let mut args = vec![
            "init",
            dir.path().to_str().unwrap(),
            "--capsule-listen",
            &ca,
            "--middleware-listen",
            &ma,
        ];
        for u in users {
            args.push("--user");
            args.push(u);
        }
        args.extend_from_slice(extra);
        let out = run(&args);
        assert!(out.status.success(), "init: {}", String::from_utf8_lossy(&out.stderr));
        let capsule = spawn_role(&["--json", "serve-capsule", "--config", dir.path().join("capsule.toml").to_str().unwrap()]);
        let middleware = spawn_role(&["--json", "middleware", "--config", dir.path().join("middleware.toml").to_str().unwrap()]);
        Self { dir, capsule, middleware }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn mount_file(&self, user: Option<&str>) -> PathBuf {
        match user {
            None => self.path("mount.toml"),
            Some(u) => self.path(&format!("mount-{u}.toml")),
        }
    }

    /// Run a batch of shell commands in a fresh mount process.
    pub fn shell(&self, user: Option<&str>, commands: &[&str]) -> (bool, Vec<Value>) {
        shell_at(&self.mount_file(user), commands)
    }

    pub fn open(&self, user: Option<&str>) -> Shell {
        Shell::open(&self.mount_file(user))
    }
}

pub fn shell_at(config: &Path, commands: &[&str]) -> (bool, Vec<Value>) {
    let mut child = cfs()
        .args(["--json", "mount", "--config", config.to_str().unwrap()])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .unwrap();
    {
        let stdin = child.stdin.as_mut().unwrap();
        for c in commands {
            writeln!(stdin, "{c}").unwrap();
        }
    }
    let out = child.wait_with_output().unwrap();
    let mut lines = json_lines(&out.stdout);
    assert_eq!(lines.first().map(|v| v["mounted"] == true), Some(true), "{lines:?}");
    lines.remove(0);
    (out.status.success(), lines)
}

/// Interactive mount process: one command in, one reply out.
pub struct Shell {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl Shell {
    pub fn open(config: &Path) -> Self {
        let mut child = cfs()
            .args(["--json", "mount", "--config", config.to_str().unwrap()])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .unwrap();
        let stdin = child.stdin.take();
        let mut stdout = BufReader::new(child.stdout.take().unwrap());
        let mut line = String::new();
        stdout.read_line(&mut line).unwrap();
        assert!(line.contains("\"mounted\":true"), "mount failed: {line:?}");
        Self { child, stdin, stdout }
    }

    pub fn cmd(&mut self, c: &str) -> Value {
        writeln!(self.stdin.as_mut().unwrap(), "{c}").unwrap();
        let mut line = String::new();
        self.stdout.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap_or_else(|e| panic!("{c}: bad reply {line:?}: {e}"))
    }

    /// Send a command that ends the process, and wait for it to die.
    pub fn die_with(mut self, c: &str) -> std::process::ExitStatus {
        writeln!(self.stdin.as_mut().unwrap(), "{c}").unwrap();
        self.child.wait().unwrap()
    }

    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }

    pub fn close(mut self) -> bool {
        drop(self.stdin.take());
        self.child.wait().unwrap().success()
    }
}

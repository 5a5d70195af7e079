// SPDX-License-Identifier: Apache-2.0

//! Python bindings: in-process stacks, mounted clients and the evaluation
//! harness. Reports come back as plain dicts and lists.

use std::path::PathBuf;
use std::sync::Arc;

use capsulefs::block::{Acl, InodeKind, InodeNumber, Uid};
use capsulefs::client::{Client, FsError};
use capsulefs::crypto::Scheme;
use capsulefs::harness::attack::{mutation_test, run_all, run_attack, AttackKind};
use capsulefs::harness::bench::{run_bench as bench, BenchConfig, BenchOp};
use capsulefs::harness::corpus::{self, CorpusEntry};
use capsulefs::harness::init::{init_fs as init, mount_from_config, InitOptions};
use capsulefs::harness::workload::run_workload_text;
use capsulefs::harness::{HarnessError, Stack, StackOptions, Transport, UserSpec};
use pyo3::exceptions::{
    PyFileExistsError, PyFileNotFoundError, PyIsADirectoryError, PyNotADirectoryError, PyOSError,
    PyPermissionError, PyRuntimeError, PyValueError,
};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

fn fs_err(e: FsError) -> PyErr {
    let msg = e.to_string();
    match e {
        FsError::NotFound => PyFileNotFoundError::new_err(msg),
        FsError::Exists => PyFileExistsError::new_err(msg),
        FsError::PermissionDenied | FsError::ReadOnly => PyPermissionError::new_err(msg),
        FsError::NotADirectory => PyNotADirectoryError::new_err(msg),
        FsError::IsADirectory => PyIsADirectoryError::new_err(msg),
        FsError::InvalidArgument(_) => PyValueError::new_err(msg),
        _ => PyOSError::new_err(msg),
    }
}

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Fs(f) => fs_err(f),
        HarnessError::Invalid(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn value_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (_, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let list = PyList::empty(py);
            for item in a {
                list.append(value_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(o) => {
            let dict = PyDict::new(py);
            for (k, item) in o {
                dict.set_item(k, value_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let json = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    value_to_py(py, &json)
}

fn split(path: &str) -> PyResult<(String, String)> {
    let trimmed = path.trim_end_matches('/');
    match trimmed.rsplit_once('/') {
        Some((dir, name)) if !name.is_empty() => {
            Ok((if dir.is_empty() { "/".into() } else { dir.into() }, name.into()))
        }
        _ => Err(PyValueError::new_err(format!("{path}: not a file path"))),
    }
}

fn transport(tcp: bool) -> Transport {
    if tcp {
        Transport::Tcp
    } else {
        Transport::InProcess
    }
}

fn scheme(crypto: bool) -> Scheme {
    if crypto {
        Scheme::Ed25519
    } else {
        Scheme::Null
    }
}

/// A mounted filesystem. Paths are absolute; writes are journaled until
/// `flush()`.
#[pyclass(name = "Client", unsendable)]
struct PyClient {
    inner: Arc<Client>,
    uid: Uid,
}

impl PyClient {
    fn node(&self, path: &str) -> PyResult<InodeNumber> {
        self.inner.lookup(path).map_err(fs_err)
    }

    fn make(&self, path: &str, kind: InodeKind) -> PyResult<InodeNumber> {
        let (dir, name) = split(path)?;
        let parent = self.node(&dir)?;
        self.inner.create(parent, &name, kind, self.uid).map_err(fs_err)
    }
}

#[pymethods]
impl PyClient {
    #[getter]
    fn uid(&self) -> Uid {
        self.uid
    }

    #[getter]
    fn read_only(&self) -> bool {
        self.inner.is_read_only()
    }

    fn lookup(&self, path: &str) -> PyResult<InodeNumber> {
        self.node(path)
    }

    #[pyo3(signature = (path = "/"))]
    fn ls(&self, path: &str) -> PyResult<Vec<String>> {
        let mut names: Vec<String> = self
            .inner
            .readdir(self.node(path)?)
            .map_err(fs_err)?
            .into_iter()
            .map(|e| e.name)
            .collect();
        names.sort();
        Ok(names)
    }

    fn stat<'py>(&self, py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
        let a = self.inner.getattr(self.node(path)?).map_err(fs_err)?;
        let d = PyDict::new(py);
        d.set_item("inode", a.inode)?;
        d.set_item("dir", a.kind == InodeKind::Directory)?;
        d.set_item("size", a.size)?;
        d.set_item("uid", a.uid)?;
        d.set_item("nlink", a.nlink)?;
        d.set_item("mtime_us", a.mtime_us)?;
        d.set_item("pending", a.pending)?;
        d.set_item("acl_members", a.acl.entries().len())?;
        Ok(d)
    }

    fn exists(&self, path: &str) -> bool {
        self.inner.lookup(path).is_ok()
    }

    fn mkdir(&self, path: &str) -> PyResult<InodeNumber> {
        self.make(path, InodeKind::Directory)
    }

    fn touch(&self, path: &str) -> PyResult<InodeNumber> {
        self.make(path, InodeKind::File)
    }

    #[pyo3(signature = (path, offset = None, length = None))]
    fn read<'py>(
        &self,
        py: Python<'py>,
        path: &str,
        offset: Option<u64>,
        length: Option<u64>,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let n = self.node(path)?;
        let data = match (offset, length) {
            (None, None) => self.inner.read_all(n),
            (off, len) => self.inner.read(n, off.unwrap_or(0), len.unwrap_or(u64::MAX)),
        }
        .map_err(fs_err)?;
        Ok(PyBytes::new(py, &data))
    }

    fn write(&self, path: &str, offset: u64, data: &[u8]) -> PyResult<usize> {
        self.inner.write(self.node(path)?, offset, data, self.uid).map_err(fs_err)
    }

    fn append(&self, path: &str, data: &[u8]) -> PyResult<usize> {
        let n = self.node(path)?;
        let size = self.inner.getattr(n).map_err(fs_err)?.size;
        self.inner.write(n, size, data, self.uid).map_err(fs_err)
    }

    fn truncate(&self, path: &str, size: u64) -> PyResult<()> {
        self.inner.truncate(self.node(path)?, size, self.uid).map_err(fs_err)
    }

    fn unlink(&self, path: &str) -> PyResult<()> {
        let (dir, name) = split(path)?;
        self.inner.unlink(self.node(&dir)?, &name, self.uid).map_err(fs_err)
    }

    fn rename(&self, source: &str, target: &str) -> PyResult<()> {
        let (fd, fname) = split(source)?;
        let (td, tname) = split(target)?;
        self.inner
            .rename(self.node(&fd)?, &fname, self.node(&td)?, &tname, self.uid)
            .map_err(fs_err)
    }

    /// Send journaled changes. Returns the flush report as a dict.
    fn flush<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.flush().map_err(fs_err)?;
        let d = PyDict::new(py);
        d.set_item("puts", r.puts)?;
        d.set_item("inodes_committed", r.inodes_committed)?;
        d.set_item("rebases", r.rebases)?;
        d.set_item("coalesced", r.coalesced)?;
        let failures = PyList::empty(py);
        for (n, why) in &r.failures {
            failures.append((*n, why.as_str()))?;
        }
        d.set_item("failures", failures)?;
        Ok(d)
    }

    /// Pull newer versions from the server; returns how many were applied.
    fn sync(&self) -> PyResult<usize> {
        self.inner.sync().map_err(fs_err)
    }

    fn pending(&self) -> usize {
        self.inner.pending()
    }

    /// Read-only view of the filesystem as of `ts` (microseconds).
    fn snapshot(&self, ts: u64) -> PyResult<PyClient> {
        let snap = self.inner.snapshot(ts).map_err(fs_err)?;
        Ok(PyClient { inner: Arc::new(snap), uid: self.uid })
    }

    fn __repr__(&self) -> String {
        format!("Client(uid={}, pending={})", self.uid, self.inner.pending())
    }
}

/// Capsule server, middleware and keys for a set of users, in a temp dir.
#[pyclass(name = "Stack", unsendable)]
struct PyStack {
    inner: Stack,
}

#[pymethods]
impl PyStack {
    #[new]
    #[pyo3(signature = (users = None, crypto = true, block_size = None, tcp = false))]
    fn new(users: Option<Vec<(String, Uid)>>, crypto: bool, block_size: Option<usize>, tcp: bool) -> PyResult<Self> {
        let mut opts = StackOptions {
            scheme: scheme(crypto),
            transport: transport(tcp),
            ..StackOptions::default()
        };
        if let Some(users) = users {
            opts.users = users.iter().map(|(n, uid)| UserSpec::member(n, *uid)).collect();
        }
        if let Some(bs) = block_size {
            opts.block_size = bs;
        }
        Stack::boot(opts).map(|inner| Self { inner }).map_err(harness_err)
    }

    #[getter]
    fn users(&self) -> Vec<(String, Uid)> {
        self.inner.users.values().map(|u| (u.name.clone(), u.uid)).collect()
    }

    #[getter]
    fn tcp(&self) -> bool {
        self.inner.is_tcp()
    }

    /// Add a user who is not in any ACL yet.
    fn add_user(&mut self, name: &str, uid: Uid) {
        self.inner.add_user(name, uid);
    }

    /// Mount a client for `user`. Mounting the same user again resumes its journal.
    fn mount(&self, user: &str) -> PyResult<PyClient> {
        let uid = self
            .inner
            .users
            .get(user)
            .ok_or_else(|| PyValueError::new_err(format!("unknown user {user}")))?
            .uid;
        let c = self.inner.mount_default(user).map_err(fs_err)?;
        Ok(PyClient { inner: Arc::new(c), uid })
    }

    /// Replace the ACL of `path` with the named users, acting through `client`.
    fn set_acl(&self, client: &PyClient, path: &str, members: Vec<String>) -> PyResult<()> {
        let mut ids = Vec::new();
        for m in &members {
            let u = self
                .inner
                .users
                .get(m)
                .ok_or_else(|| PyValueError::new_err(format!("unknown user {m}")))?;
            ids.push(u.identity());
        }
        let n = client.node(path)?;
        client.inner.set_acl(n, Acl::new(ids), client.uid).map_err(fs_err)
    }

    /// Revoke a user's key at the middleware. Returns the revoked count.
    #[pyo3(signature = (user, scrub = false))]
    fn revoke(&self, user: &str, scrub: bool) -> PyResult<u64> {
        if !self.inner.users.contains_key(user) {
            return Err(PyValueError::new_err(format!("unknown user {user}")));
        }
        self.inner.revoke(user, scrub).map_err(|e| PyPermissionError::new_err(e.to_string()))
    }

    /// PUTs seen by the middleware so far.
    fn puts(&self) -> u64 {
        self.inner.puts.total()
    }

    fn audit_violations(&self) -> usize {
        self.inner.audit.violations().len()
    }
}

/// Create a deployment directory with keys, configs and the genesis root.
#[pyfunction]
#[pyo3(signature = (dir, users = None, block_size = None, crypto = true, force = false))]
fn init_fs<'py>(
    py: Python<'py>,
    dir: PathBuf,
    users: Option<Vec<(String, Uid)>>,
    block_size: Option<usize>,
    crypto: bool,
    force: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let mut opts = InitOptions {
        scheme: scheme(crypto),
        force,
        ..InitOptions::default()
    };
    if let Some(users) = users {
        opts.users = users.iter().map(|(n, uid)| UserSpec::member(n, *uid)).collect();
    }
    if let Some(bs) = block_size {
        opts.block_size = bs;
    }
    let summary = py.detach(|| init(&dir, &opts)).map_err(harness_err)?;
    to_py(py, &summary)
}

/// Mount from a `mount.toml`. The servers it names must be running.
#[pyfunction]
#[pyo3(signature = (config, snapshot = None))]
fn mount(config: PathBuf, snapshot: Option<u64>) -> PyResult<PyClient> {
    let (c, cfg) = mount_from_config(&config, snapshot).map_err(harness_err)?;
    Ok(PyClient { inner: Arc::new(c), uid: cfg.uid })
}

fn base_options(tcp: bool) -> StackOptions {
    StackOptions {
        transport: transport(tcp),
        ..StackOptions::default()
    }
}

/// Run one attack scenario, or all of them with `kind="all"`.
#[pyfunction]
#[pyo3(signature = (kind = "all", tcp = false))]
fn attack<'py>(py: Python<'py>, kind: &str, tcp: bool) -> PyResult<Bound<'py, PyAny>> {
    let base = base_options(tcp);
    if kind == "all" {
        let reports = py.detach(|| run_all(&base)).map_err(harness_err)?;
        return to_py(py, &reports);
    }
    let k = AttackKind::from_name(kind).ok_or_else(|| PyValueError::new_err(format!("unknown attack {kind}")))?;
    let report = py.detach(|| run_attack(k, &base)).map_err(harness_err)?;
    to_py(py, &report)
}

/// Rerun each attack with the defence that should stop it switched off.
#[pyfunction]
#[pyo3(signature = (tcp = false))]
fn mutation<'py>(py: Python<'py>, tcp: bool) -> PyResult<Bound<'py, PyAny>> {
    let base = base_options(tcp);
    let reports = py.detach(|| mutation_test(&base)).map_err(harness_err)?;
    to_py(py, &reports)
}

/// Time reads or writes; sizes in bytes. Returns rows and samples.
#[pyfunction]
#[pyo3(signature = (op = "write", crypto = true, sizes = None, trials = 20, cached = false))]
fn run_bench<'py>(
    py: Python<'py>,
    op: &str,
    crypto: bool,
    sizes: Option<Vec<usize>>,
    trials: usize,
    cached: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let op = match op {
        "read" => BenchOp::Read,
        "write" => BenchOp::Write,
        other => return Err(PyValueError::new_err(format!("unknown op {other}"))),
    };
    let mut cfg = BenchConfig::new(op, crypto);
    cfg.trials = trials;
    cfg.cached = cached;
    if let Some(s) = sizes {
        cfg.sizes = s;
    }
    let report = py.detach(|| bench(&cfg)).map_err(harness_err)?;
    to_py(py, &report)
}

/// Run a workload script on a fresh stack.
#[pyfunction]
#[pyo3(signature = (script, tcp = false))]
fn workload<'py>(py: Python<'py>, script: &str, tcp: bool) -> PyResult<Bound<'py, PyAny>> {
    let report = py.detach(|| run_workload_text(script, transport(tcp))).map_err(harness_err)?;
    to_py(py, &report)
}

/// Seeded signed blocks as `(index, block_hex, digest_hex)` tuples.
#[pyfunction]
#[pyo3(signature = (seed, count = 500))]
fn corpus_generate(seed: u64, count: usize) -> Vec<(usize, String, String)> {
    corpus::generate(seed, count)
        .into_iter()
        .map(|e| (e.index, e.block, e.digest))
        .collect()
}

/// Check `(index, block_hex, digest_hex)` tuples against the seeded corpus.
#[pyfunction]
fn corpus_check<'py>(py: Python<'py>, seed: u64, entries: Vec<(usize, String, String)>) -> PyResult<Bound<'py, PyAny>> {
    let theirs: Vec<CorpusEntry> = entries
        .into_iter()
        .map(|(index, block, digest)| CorpusEntry { index, block, digest })
        .collect();
    let check = corpus::check(seed, &theirs);
    let d = to_py(py, &check)?;
    d.set_item("pass", check.pass())?;
    Ok(d)
}

#[pymodule]
fn capsulefs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStack>()?;
    m.add_class::<PyClient>()?;
    m.add_function(wrap_pyfunction!(init_fs, m)?)?;
    m.add_function(wrap_pyfunction!(mount, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(mutation, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add_function(wrap_pyfunction!(workload, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_generate, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_check, m)?)?;
    Ok(())
}

// SPDX-License-Identifier: Apache-2.0

//! TCP transport for [`CapsuleService`] and [`WriteService`].
//!
//! Every message is a frame: `u32` little-endian length of the rest, a
//! one-byte frame type, then a canonical payload. A connection carries one
//! request at a time, except after SUBSCRIBE, where the server streams EVENT
//! frames until the client hangs up.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, warn};

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::Digest;
use crate::merkle::{MerkleProof, SignedRoot};
use crate::service::{
    AppendReceipt, CapsuleError, CapsuleService, PutError, PutReceipt, Rejection, RejectionKind,
    Subscription, WriteService,
};

pub mod frame {
    pub const APPEND: u8 = 0x01;
    pub const GET: u8 = 0x02;
    pub const LEAVES: u8 = 0x03;
    pub const PROOF: u8 = 0x04;
    pub const SUBSCRIBE: u8 = 0x05;
    pub const LEN: u8 = 0x06;
    pub const PUT: u8 = 0x10;
    pub const REVOKE: u8 = 0x11;
    pub const OK: u8 = 0x80;
    pub const ERR: u8 = 0x81;
    pub const EVENT: u8 = 0x82;
    pub const HEARTBEAT: u8 = 0x83;
}

pub const MAX_FRAME: usize = 96 << 20;
const HEARTBEAT_EVERY: Duration = Duration::from_millis(500);

pub fn write_frame(w: &mut impl Write, kind: u8, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len() + 1).map_err(|_| io::Error::other("frame too large"))?;
    let mut buf = Vec::with_capacity(payload.len() + 5);
    buf.extend_from_slice(&len.to_le_bytes());
    buf.push(kind);
    buf.extend_from_slice(payload);
    w.write_all(&buf)?;
    w.flush()
}

pub fn read_frame(r: &mut impl Read) -> io::Result<(u8, Vec<u8>)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad frame length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let kind = buf.remove(0);
    Ok((kind, buf))
}

fn encode_capsule_error(e: &CapsuleError) -> Vec<u8> {
    let mut enc = Encoder::new();
    match e {
        CapsuleError::NotFound => enc.u8(1),
        CapsuleError::UnknownCapsule(d) => enc.u8(2).value(d),
        CapsuleError::RejectedWrite(m) => enc.u8(3).str(m),
        CapsuleError::DanglingChain(d) => enc.u8(4).value(d),
        CapsuleError::InvalidCursor { from, len } => enc.u8(5).u64(*from).u64(*len),
        CapsuleError::RootMismatch => enc.u8(6),
        CapsuleError::ReadOnly => enc.u8(7),
        CapsuleError::Io(m) => enc.u8(8).str(m),
        CapsuleError::Transport(m) => enc.u8(9).str(m),
    };
    enc.finish()
}

fn decode_capsule_error(bytes: &[u8]) -> Result<CapsuleError, CodecError> {
    let mut d = Decoder::new(bytes);
    let e = match d.u8()? {
        1 => CapsuleError::NotFound,
        2 => CapsuleError::UnknownCapsule(d.value()?),
        3 => CapsuleError::RejectedWrite(d.string()?),
        4 => CapsuleError::DanglingChain(d.value()?),
        5 => CapsuleError::InvalidCursor {
            from: d.u64()?,
            len: d.u64()?,
        },
        6 => CapsuleError::RootMismatch,
        7 => CapsuleError::ReadOnly,
        8 => CapsuleError::Io(d.string()?),
        9 => CapsuleError::Transport(d.string()?),
        _ => return Err(CodecError::Invalid("capsule error code")),
    };
    d.finish()?;
    Ok(e)
}

fn encode_put_error(e: &PutError) -> Vec<u8> {
    let mut enc = Encoder::new();
    match e {
        PutError::Rejected(r) => {
            enc.u8(1)
                .u8(r.kind.code())
                .str(&r.detail)
                .option(r.current.as_ref(), |e, d| {
                    e.value(d);
                });
        }
        PutError::Transport(m) => {
            enc.u8(2).str(m);
        }
    }
    enc.finish()
}

fn decode_put_error(bytes: &[u8]) -> Result<PutError, CodecError> {
    let mut d = Decoder::new(bytes);
    let e = match d.u8()? {
        1 => {
            let kind = RejectionKind::from_code(d.u8()?).ok_or(CodecError::Invalid("rejection kind"))?;
            let detail = d.string()?;
            let current = d.option(|d| d.value())?;
            PutError::Rejected(Rejection { kind, detail, current })
        }
        2 => PutError::Transport(d.string()?),
        _ => return Err(CodecError::Invalid("put error code")),
    };
    d.finish()?;
    Ok(e)
}

/// Services a [`NetServer`] exposes. Either may be absent.
#[derive(Clone, Default)]
pub struct Handlers {
    pub capsules: Option<Arc<dyn CapsuleService>>,
    pub writer: Option<Arc<dyn WriteService>>,
}

/// A listening TCP endpoint; stops on drop.
pub struct NetServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl NetServer {
    pub fn bind(addr: impl ToSocketAddrs, handlers: Handlers) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let s = Arc::clone(&stop);
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if s.load(Ordering::Relaxed) {
                    break;
                }
                match conn {
                    Ok(stream) => {
                        let h = handlers.clone();
                        let s = Arc::clone(&s);
                        std::thread::spawn(move || {
                            if let Err(e) = serve_connection(stream, &h, &s) {
                                debug!("connection closed: {e}");
                            }
                        });
                    }
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
        });
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Block until the server is stopped from another thread.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::Relaxed) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for NetServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(mut stream: TcpStream, h: &Handlers, stop: &AtomicBool) -> io::Result<()> {
    stream.set_nodelay(true)?;
    loop {
        if stop.load(Ordering::Relaxed) {
            return Ok(());
        }
        let (kind, payload) = read_frame(&mut stream)?;
        if kind == frame::SUBSCRIBE {
            return stream_events(stream, h, &payload, stop);
        }
        let (rk, body) = dispatch(h, kind, &payload);
        write_frame(&mut stream, rk, &body)?;
    }
}

fn capsule_reply(r: Result<Vec<u8>, CapsuleError>) -> (u8, Vec<u8>) {
    match r {
        Ok(b) => (frame::OK, b),
        Err(e) => (frame::ERR, encode_capsule_error(&e)),
    }
}

fn bad_request(e: impl std::fmt::Display) -> CapsuleError {
    CapsuleError::Transport(format!("bad request: {e}"))
}

fn dispatch(h: &Handlers, kind: u8, payload: &[u8]) -> (u8, Vec<u8>) {
    match kind {
        frame::PUT | frame::REVOKE => {
            let Some(w) = &h.writer else {
                return (frame::ERR, encode_put_error(&PutError::Transport("no middleware here".into())));
            };
            let res = if kind == frame::PUT {
                w.put(payload).map(|r| r.encode())
            } else {
                w.revoke(payload).map(|n| n.to_le_bytes().to_vec())
            };
            match res {
                Ok(b) => (frame::OK, b),
                Err(e) => (frame::ERR, encode_put_error(&e)),
            }
        }
        _ => {
            let Some(c) = &h.capsules else {
                return capsule_reply(Err(CapsuleError::Transport("no capsule server here".into())));
            };
            capsule_reply(capsule_request(c.as_ref(), kind, payload))
        }
    }
}

fn capsule_request(c: &dyn CapsuleService, kind: u8, payload: &[u8]) -> Result<Vec<u8>, CapsuleError> {
    let mut d = Decoder::new(payload);
    let capsule: Digest = d.value().map_err(bad_request)?;
    let mut out = Encoder::new();
    match kind {
        frame::APPEND => {
            let sealed = d.bytes().map_err(bad_request)?.to_vec();
            let root: SignedRoot = d.value().map_err(bad_request)?;
            d.finish().map_err(bad_request)?;
            let r = c.append(&capsule, &sealed, &root)?;
            out.value(&r.digest).u64(r.sequence).value(&r.proof);
        }
        frame::GET => {
            let digest: Digest = d.value().map_err(bad_request)?;
            d.finish().map_err(bad_request)?;
            let (bytes, proof) = c.get(&capsule, &digest)?;
            out.bytes(&bytes).value(&proof);
        }
        frame::LEAVES => {
            d.finish().map_err(bad_request)?;
            let leaves = c.leaves(&capsule)?;
            out.list(&leaves, |e, l| {
                e.value(l);
            });
        }
        frame::PROOF => {
            let digest: Digest = d.value().map_err(bad_request)?;
            let size = d.option(|d| d.u64()).map_err(bad_request)?;
            d.finish().map_err(bad_request)?;
            out.value(&c.proof(&capsule, &digest, size)?);
        }
        frame::LEN => {
            d.finish().map_err(bad_request)?;
            out.u64(c.len(&capsule)?);
        }
        other => return Err(bad_request(format!("unknown frame type {other:#04x}"))),
    }
    Ok(out.finish())
}

fn stream_events(mut stream: TcpStream, h: &Handlers, payload: &[u8], stop: &AtomicBool) -> io::Result<()> {
    let sub = h
        .capsules
        .as_ref()
        .ok_or_else(|| CapsuleError::Transport("no capsule server here".into()))
        .and_then(|c| {
            let mut d = Decoder::new(payload);
            let capsule: Digest = d.value().map_err(bad_request)?;
            let from = d.u64().map_err(bad_request)?;
            d.finish().map_err(bad_request)?;
            c.subscribe(&capsule, from)
        });
    let mut sub = match sub {
        Ok(s) => {
            write_frame(&mut stream, frame::OK, &[])?;
            s
        }
        Err(e) => return write_frame(&mut stream, frame::ERR, &encode_capsule_error(&e)),
    };
    let mut last_beat = Instant::now();
    while !stop.load(Ordering::Relaxed) {
        match sub.next_timeout(Duration::from_millis(100)) {
            Ok(Some((seq, digest))) => {
                let mut e = Encoder::new();
                e.u64(seq).value(&digest);
                write_frame(&mut stream, frame::EVENT, &e.finish())?;
            }
            Ok(None) => {
                if last_beat.elapsed() >= HEARTBEAT_EVERY {
                    write_frame(&mut stream, frame::HEARTBEAT, &[])?;
                    last_beat = Instant::now();
                }
            }
            Err(e) => return write_frame(&mut stream, frame::ERR, &encode_capsule_error(&e)),
        }
    }
    stream.shutdown(Shutdown::Both)
}

/// Client for a remote [`NetServer`]: implements both service traits over
/// a small pool of connections.
pub struct RemoteService {
    addr: SocketAddr,
    timeout: Duration,
    pool: Mutex<Vec<TcpStream>>,
}

const POOL_MAX: usize = 8;

impl RemoteService {
    pub fn new(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "address resolves to nothing"))?;
        Ok(Self {
            addr,
            timeout: Duration::from_secs(30),
            pool: Mutex::new(Vec::new()),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn connect(&self) -> io::Result<TcpStream> {
        let s = TcpStream::connect_timeout(&self.addr, self.timeout)?;
        s.set_nodelay(true)?;
        s.set_read_timeout(Some(self.timeout))?;
        s.set_write_timeout(Some(self.timeout))?;
        Ok(s)
    }

    fn exchange_on(stream: &mut TcpStream, kind: u8, payload: &[u8]) -> io::Result<(u8, Vec<u8>)> {
        write_frame(stream, kind, payload)?;
        read_frame(stream)
    }

    /// One request/response. A pooled connection that turns out to be dead
    /// is replaced once when `retry` is set.
    fn call(&self, kind: u8, payload: &[u8], retry: bool) -> io::Result<(u8, Vec<u8>)> {
        let pooled = self.pool.lock().unwrap().pop();
        let (mut stream, reused) = match pooled {
            Some(s) => (s, true),
            None => (self.connect()?, false),
        };
        let res = match Self::exchange_on(&mut stream, kind, payload) {
            Err(_) if reused && retry => {
                stream = self.connect()?;
                Self::exchange_on(&mut stream, kind, payload)
            }
            r => r,
        };
        if res.is_ok() {
            let mut pool = self.pool.lock().unwrap();
            if pool.len() < POOL_MAX {
                pool.push(stream);
            }
        }
        res
    }

    fn capsule_call(&self, kind: u8, payload: Vec<u8>) -> Result<Vec<u8>, CapsuleError> {
        let transport = |e: io::Error| CapsuleError::Transport(format!("{}: {e}", self.addr));
        let (k, body) = self.call(kind, &payload, true).map_err(transport)?;
        match k {
            frame::OK => Ok(body),
            frame::ERR => Err(decode_capsule_error(&body)
                .unwrap_or_else(|e| CapsuleError::Transport(format!("undecodable error reply: {e}")))),
            other => Err(CapsuleError::Transport(format!("unexpected frame {other:#04x}"))),
        }
    }

    fn put_call(&self, kind: u8, payload: &[u8]) -> Result<Vec<u8>, PutError> {
        let (k, body) = self
            .call(kind, payload, false)
            .map_err(|e| PutError::Transport(format!("{}: {e}", self.addr)))?;
        match k {
            frame::OK => Ok(body),
            frame::ERR => Err(decode_put_error(&body)
                .unwrap_or_else(|e| PutError::Transport(format!("undecodable error reply: {e}")))),
            other => Err(PutError::Transport(format!("unexpected frame {other:#04x}"))),
        }
    }
}

fn reply_error(e: CodecError) -> CapsuleError {
    CapsuleError::Transport(format!("malformed reply: {e}"))
}

fn request(capsule: &Digest) -> Encoder {
    let mut e = Encoder::new();
    e.value(capsule);
    e
}

impl CapsuleService for RemoteService {
    fn append(&self, capsule: &Digest, sealed: &[u8], root: &SignedRoot) -> Result<AppendReceipt, CapsuleError> {
        let mut e = request(capsule);
        e.bytes(sealed).value(root);
        let body = self.capsule_call(frame::APPEND, e.finish())?;
        let mut d = Decoder::new(&body);
        let r = AppendReceipt {
            digest: d.value().map_err(reply_error)?,
            sequence: d.u64().map_err(reply_error)?,
            proof: d.value().map_err(reply_error)?,
        };
        d.finish().map_err(reply_error)?;
        Ok(r)
    }

    fn get(&self, capsule: &Digest, digest: &Digest) -> Result<(Vec<u8>, MerkleProof), CapsuleError> {
        let mut e = request(capsule);
        e.value(digest);
        let body = self.capsule_call(frame::GET, e.finish())?;
        let mut d = Decoder::new(&body);
        let bytes = d.bytes().map_err(reply_error)?.to_vec();
        let proof = d.value().map_err(reply_error)?;
        d.finish().map_err(reply_error)?;
        Ok((bytes, proof))
    }

    fn leaves(&self, capsule: &Digest) -> Result<Vec<Digest>, CapsuleError> {
        let body = self.capsule_call(frame::LEAVES, request(capsule).finish())?;
        let mut d = Decoder::new(&body);
        let l = d.list(|d| d.value()).map_err(reply_error)?;
        d.finish().map_err(reply_error)?;
        Ok(l)
    }

    fn proof(&self, capsule: &Digest, digest: &Digest, tree_size: Option<u64>) -> Result<MerkleProof, CapsuleError> {
        let mut e = request(capsule);
        e.value(digest).option(tree_size.as_ref(), |e, s| {
            e.u64(*s);
        });
        let body = self.capsule_call(frame::PROOF, e.finish())?;
        MerkleProof::decode(&body).map_err(reply_error)
    }

    fn len(&self, capsule: &Digest) -> Result<u64, CapsuleError> {
        let body = self.capsule_call(frame::LEN, request(capsule).finish())?;
        let mut d = Decoder::new(&body);
        let n = d.u64().map_err(reply_error)?;
        d.finish().map_err(reply_error)?;
        Ok(n)
    }

    fn subscribe(&self, capsule: &Digest, from: u64) -> Result<Box<dyn Subscription>, CapsuleError> {
        let transport = |e: io::Error| CapsuleError::Transport(format!("{}: {e}", self.addr));
        let mut stream = self.connect().map_err(transport)?;
        let mut e = request(capsule);
        e.u64(from);
        let (k, body) = Self::exchange_on(&mut stream, frame::SUBSCRIBE, &e.finish()).map_err(transport)?;
        match k {
            frame::OK => Ok(Box::new(RemoteSubscription {
                stream,
                cursor: from,
                partial: Vec::new(),
            })),
            frame::ERR => Err(decode_capsule_error(&body).unwrap_or_else(reply_error)),
            other => Err(CapsuleError::Transport(format!("unexpected frame {other:#04x}"))),
        }
    }
}

impl WriteService for RemoteService {
    fn put(&self, request: &[u8]) -> Result<PutReceipt, PutError> {
        let body = self.put_call(frame::PUT, request)?;
        PutReceipt::decode(&body).map_err(|e| PutError::Transport(format!("malformed reply: {e}")))
    }

    fn revoke(&self, request: &[u8]) -> Result<u64, PutError> {
        let body = self.put_call(frame::REVOKE, request)?;
        let arr: [u8; 8] = body
            .try_into()
            .map_err(|_| PutError::Transport("malformed revoke reply".into()))?;
        Ok(u64::from_le_bytes(arr))
    }
}

struct RemoteSubscription {
    stream: TcpStream,
    cursor: u64,
    /// Bytes of a frame cut short by a timeout.
    partial: Vec<u8>,
}

impl RemoteSubscription {
    /// Read until one whole frame is buffered, or the deadline passes.
    fn poll_frame(&mut self, deadline: Instant) -> io::Result<Option<(u8, Vec<u8>)>> {
        loop {
            if self.partial.len() >= 4 {
                let len = u32::from_le_bytes(self.partial[..4].try_into().unwrap()) as usize;
                if len == 0 || len > MAX_FRAME {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, "bad frame length"));
                }
                if self.partial.len() >= 4 + len {
                    let rest = self.partial.split_off(4 + len);
                    let frame = std::mem::replace(&mut self.partial, rest);
                    return Ok(Some((frame[4], frame[5..].to_vec())));
                }
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            self.stream
                .set_read_timeout(Some((deadline - now).max(Duration::from_millis(1))))?;
            let mut buf = [0u8; 4096];
            match self.stream.read(&mut buf) {
                Ok(0) => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "server closed the stream")),
                Ok(n) => self.partial.extend_from_slice(&buf[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Ok(None)
                }
                Err(e) => return Err(e),
            }
        }
    }
}

impl Subscription for RemoteSubscription {
    fn next_timeout(&mut self, timeout: Duration) -> Result<Option<(u64, Digest)>, CapsuleError> {
        let deadline = Instant::now() + timeout;
        loop {
            let Some((kind, body)) = self
                .poll_frame(deadline)
                .map_err(|e| CapsuleError::Transport(format!("subscription: {e}")))?
            else {
                return Ok(None);
            };
            match kind {
                frame::HEARTBEAT => continue,
                frame::EVENT => {
                    let mut d = Decoder::new(&body);
                    let seq = d.u64().map_err(reply_error)?;
                    let digest = d.value().map_err(reply_error)?;
                    d.finish().map_err(reply_error)?;
                    self.cursor = seq + 1;
                    return Ok(Some((seq, digest)));
                }
                frame::ERR => return Err(decode_capsule_error(&body).unwrap_or_else(reply_error)),
                other => return Err(CapsuleError::Transport(format!("unexpected frame {other:#04x}"))),
            }
        }
    }

    fn cursor(&self) -> u64 {
        self.cursor
    }
}

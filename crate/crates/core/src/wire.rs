//! The framed request/response protocol spoken by every daemon.
//!
//! A message is `u32 big-endian length | UTF-8 JSON payload`. When a header sets
//! `body: true`, a binary body follows as a sequence of length-prefixed chunks
//! terminated by a zero-length chunk. Frames and chunks are capped at 16 MiB.

use crate::error::{ErrorCode, GvfError, Result};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME: usize = 16 * 1024 * 1024;
pub const CHUNK_SIZE: usize = 1024 * 1024;

/// Identity presented with a request: a subject plus its proof token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Credential {
    pub subject: String,
    pub token: String,
}

impl Credential {
    pub fn new(subject: impl Into<String>, token: impl Into<String>) -> Self {
        Credential {
            subject: subject.into(),
            token: token.into(),
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestHeader {
    pub v: u32,
    pub id: String,
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth: Option<Credential>,
    #[serde(default)]
    pub args: Value,
    #[serde(default, skip_serializing_if = "is_false")]
    pub body: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Err,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseHeader {
    pub v: u32,
    pub id: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub body: bool,
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame exceeds 16 MiB"));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(payload)
}

/// Reads one frame. `Ok(None)` means the peer closed cleanly at a frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame exceeds 16 MiB"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn write_body<W: Write>(w: &mut W, data: &[u8]) -> io::Result<()> {
    for chunk in data.chunks(CHUNK_SIZE) {
        write_frame(w, chunk)?;
    }
    write_frame(w, &[])
}

pub fn read_body<R: Read>(r: &mut R) -> io::Result<Vec<u8>> {
    let mut out = Vec::new();
    loop {
        match read_frame(r)? {
            None => return Err(io::ErrorKind::UnexpectedEof.into()),
            Some(chunk) if chunk.is_empty() => return Ok(out),
            Some(chunk) => out.extend_from_slice(&chunk),
        }
    }
}

/// A decoded request as handed to a service.
#[derive(Debug, Clone)]
pub struct Request {
    pub id: String,
    pub op: String,
    pub auth: Option<Credential>,
    pub args: Value,
    pub body: Option<Vec<u8>>,
}

impl Request {
    pub fn new(op: &str, auth: Option<Credential>, args: Value) -> Self {
        Request {
            id: String::new(),
            op: op.to_string(),
            auth,
            args,
            body: None,
        }
    }

    /// Deserialize `args` into a typed argument struct.
    pub fn parse_args<T: DeserializeOwned>(&self) -> Result<T> {
        let args = if self.args.is_null() {
            Value::Object(Default::default())
        } else {
            self.args.clone()
        };
        serde_json::from_value(args).map_err(|e| GvfError::badreq(format!("{}: bad args: {e}", self.op)))
    }

    pub fn credential(&self) -> Result<&Credential> {
        self.auth
            .as_ref()
            .ok_or_else(|| GvfError::perm(format!("{} requires authentication", self.op)))
    }

    pub fn take_body(&mut self) -> Result<Vec<u8>> {
        self.body
            .take()
            .ok_or_else(|| GvfError::badreq(format!("{} expects a body", self.op)))
    }
}

#[derive(Debug)]
pub struct Reply {
    pub result: Result<Value>,
    pub body: Option<Vec<u8>>,
}

impl Reply {
    pub fn ok(v: impl Serialize) -> Reply {
        Reply::from_result(Ok(v))
    }

    pub fn from_result<T: Serialize>(r: Result<T>) -> Reply {
        Reply {
            result: r.and_then(|v| serde_json::to_value(v).map_err(GvfError::from)),
            body: None,
        }
    }

    pub fn with_body(v: impl Serialize, body: Vec<u8>) -> Reply {
        let mut r = Reply::ok(v);
        r.body = Some(body);
        r
    }

    pub fn err(e: GvfError) -> Reply {
        Reply {
            result: Err(e),
            body: None,
        }
    }
}

/// Per-connection facts available to a handler.
#[derive(Debug, Clone)]
pub struct ConnInfo {
    pub peer: Option<SocketAddr>,
}

pub trait Handler: Send + Sync + 'static {
    fn handle(&self, req: Request, conn: &ConnInfo) -> Reply;
}

/// Routes requests to handlers by op-name prefix (`"srb."`, `"mcat."`, ...).
#[derive(Default)]
pub struct Router {
    routes: Vec<(String, Arc<dyn Handler>)>,
}

impl Router {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn route(mut self, prefix: &str, handler: Arc<dyn Handler>) -> Self {
        self.routes.push((prefix.to_string(), handler));
        self
    }
}

impl Handler for Router {
    fn handle(&self, req: Request, conn: &ConnInfo) -> Reply {
        match self.routes.iter().find(|(p, _)| req.op.starts_with(p.as_str())) {
            Some((_, h)) => h.handle(req, conn),
            None => Reply::err(GvfError::badreq(format!("unknown op {}", req.op))),
        }
    }
}

struct ServerShared {
    shutdown: AtomicBool,
    conns: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
}

/// A threaded TCP server; one thread per connection.
pub struct Server {
    addr: SocketAddr,
    shared: Arc<ServerShared>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind(addr: &str, handler: Arc<dyn Handler>) -> io::Result<Server> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(ServerShared {
            shutdown: AtomicBool::new(false),
            conns: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(0),
        });
        let sh = shared.clone();
        let accept = std::thread::Builder::new()
            .name(format!("accept-{addr}"))
            .spawn(move || accept_loop(listener, handler, sh))?;
        Ok(Server {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting, severs every open connection and joins the accept thread.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        for (_, s) in self.shared.conns.lock().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(500));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, handler: Arc<dyn Handler>, shared: Arc<ServerShared>) {
    for stream in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
        if let Ok(clone) = stream.try_clone() {
            shared.conns.lock().insert(id, clone);
        }
        // Close the race with a concurrent shutdown that drained the map first.
        if shared.shutdown.load(Ordering::SeqCst) {
            let _ = stream.shutdown(Shutdown::Both);
            break;
        }
        let handler = handler.clone();
        let sh = shared.clone();
        let spawned = std::thread::Builder::new()
            .name("conn".into())
            .spawn(move || {
                let _ = stream.set_nodelay(true);
                if let Err(e) = serve_connection(stream, handler.as_ref(), &sh) {
                    log::debug!("connection closed: {e}");
                }
                sh.conns.lock().remove(&id);
            });
        if let Err(e) = spawned {
            log::warn!("cannot spawn connection thread: {e}");
            shared.conns.lock().remove(&id);
        }
    }
}

fn serve_connection(stream: TcpStream, handler: &dyn Handler, shared: &ServerShared) -> io::Result<()> {
    let conn = ConnInfo {
        peer: stream.peer_addr().ok(),
    };
    let mut reader = io::BufReader::new(stream.try_clone()?);
    let mut writer = io::BufWriter::new(stream);
    loop {
        let Some(frame) = read_frame(&mut reader)? else {
            return Ok(());
        };
        if shared.shutdown.load(Ordering::SeqCst) {
            return Ok(());
        }
        let header: RequestHeader = match serde_json::from_slice(&frame) {
            Ok(h) => h,
            Err(e) => {
                let resp = error_header(String::new(), GvfError::badreq(format!("bad request header: {e}")));
                write_frame(&mut writer, &serde_json::to_vec(&resp)?)?;
                writer.flush()?;
                return Ok(());
            }
        };
        let body = if header.body {
            Some(read_body(&mut reader)?)
        } else {
            None
        };
        let id = header.id.clone();
        let reply = if header.v != PROTOCOL_VERSION {
            Reply::err(GvfError::badreq(format!("unsupported protocol version {}", header.v)))
        } else {
            handler.handle(
                Request {
                    id: header.id,
                    op: header.op,
                    auth: header.auth,
                    args: header.args,
                    body,
                },
                &conn,
            )
        };
        if shared.shutdown.load(Ordering::SeqCst) {
            return Ok(());
        }
        let resp = match reply.result {
            Ok(v) => ResponseHeader {
                v: PROTOCOL_VERSION,
                id,
                status: Status::Ok,
                error: None,
                message: None,
                result: Some(v),
                body: reply.body.is_some(),
            },
            Err(e) => error_header(id, e),
        };
        write_frame(&mut writer, &serde_json::to_vec(&resp)?)?;
        if resp.body {
            if let Some(b) = &reply.body {
                write_body(&mut writer, b)?;
            }
        }
        writer.flush()?;
    }
}

fn error_header(id: String, e: GvfError) -> ResponseHeader {
    ResponseHeader {
        v: PROTOCOL_VERSION,
        id,
        status: Status::Err,
        error: Some(e.code),
        message: Some(e.message),
        result: None,
        body: false,
    }
}

/// A pooled client for one daemon address.
pub struct Client {
    addr: String,
    pool: Mutex<Vec<TcpStream>>,
    next_id: AtomicU64,
    timeout: Duration,
}

impl Client {
    pub fn new(addr: impl Into<String>) -> Self {
        Client {
            addr: addr.into(),
            pool: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
            timeout: Duration::from_secs(60),
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn connect(&self) -> Result<TcpStream> {
        let unavail = |e: io::Error| GvfError::unavail(format!("{}: {e}", self.addr));
        let addrs: Vec<SocketAddr> = self.addr.to_socket_addrs().map_err(unavail)?.collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, Duration::from_secs(2)) {
                Ok(s) => {
                    s.set_nodelay(true).map_err(unavail)?;
                    s.set_read_timeout(Some(self.timeout)).map_err(unavail)?;
                    s.set_write_timeout(Some(self.timeout)).map_err(unavail)?;
                    return Ok(s);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(unavail(last.unwrap_or_else(|| io::ErrorKind::AddrNotAvailable.into())))
    }

    /// Takes a pooled connection that the peer has not closed, or opens a new one.
    fn checkout(&self) -> Result<TcpStream> {
        loop {
            let Some(s) = self.pool.lock().pop() else {
                return self.connect();
            };
            if connection_alive(&s) {
                return Ok(s);
            }
        }
    }

    /// Issues one request. Transport failures map to `E_UNAVAIL`.
    pub fn call(
        &self,
        op: &str,
        auth: Option<&Credential>,
        args: Value,
        body: Option<&[u8]>,
    ) -> Result<(Value, Option<Vec<u8>>)> {
        let stream = self.checkout()?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed).to_string();
        let header = RequestHeader {
            v: PROTOCOL_VERSION,
            id: id.clone(),
            op: op.to_string(),
            auth: auth.cloned(),
            args,
            body: body.is_some(),
        };
        let io_err = |e: io::Error| GvfError::unavail(format!("{} {op}: {e}", self.addr));
        let (resp, resp_body) = (|| -> io::Result<(ResponseHeader, Option<Vec<u8>>)> {
            let mut w = io::BufWriter::new(&stream);
            write_frame(&mut w, &serde_json::to_vec(&header)?)?;
            if let Some(b) = body {
                write_body(&mut w, b)?;
            }
            w.flush()?;
            drop(w);
            let mut r = &stream;
            let frame = read_frame(&mut r)?.ok_or(io::ErrorKind::UnexpectedEof)?;
            let resp: ResponseHeader = serde_json::from_slice(&frame)?;
            let resp_body = if resp.body { Some(read_body(&mut r)?) } else { None };
            Ok((resp, resp_body))
        })()
        .map_err(io_err)?;
        self.pool.lock().push(stream);
        match resp.status {
            Status::Ok => Ok((resp.result.unwrap_or(Value::Null), resp_body)),
            Status::Err => Err(GvfError::new(
                resp.error.unwrap_or(ErrorCode::Unavail),
                resp.message.unwrap_or_default(),
            )),
        }
    }

    pub fn call_typed<T: DeserializeOwned>(&self, op: &str, auth: Option<&Credential>, args: Value) -> Result<T> {
        let (v, _) = self.call(op, auth, args, None)?;
        serde_json::from_value(v).map_err(|e| GvfError::unavail(format!("{op}: malformed reply: {e}")))
    }
}

fn connection_alive(s: &TcpStream) -> bool {
    if s.set_nonblocking(true).is_err() {
        return false;
    }
    let mut b = [0u8; 1];
    let alive = match s.peek(&mut b) {
        Ok(0) => false,
        Ok(_) => false, // unsolicited bytes: protocol desync
        Err(e) => e.kind() == io::ErrorKind::WouldBlock,
    };
    alive && s.set_nonblocking(false).is_ok()
}

//! Event socket: accepts newline-delimited JSON events from any number of
//! local connections.
//!
//! On connect the server writes one handshake line,
//! `{"epoch_ns": <CLOCK_MONOTONIC epoch>, "proto": 1}`, so clients can stamp
//! events relative to the harness clock. Malformed or oversized lines are
//! counted and skipped; the connection stays open.

use std::fmt;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{parse_event_line, PhaseEvent};
use crate::clock::MonotonicClock;

pub const MAX_LINE_BYTES: usize = 64 * 1024;
pub const PROTOCOL_VERSION: u32 = 1;

const POLL: Duration = Duration::from_millis(10);

/// Where the event server listens: `tcp:HOST:PORT` or `unix:PATH` (a bare
/// path is taken as a unix socket).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(SocketAddr),
    Unix(PathBuf),
}

impl Endpoint {
    /// Loopback TCP on an ephemeral port.
    pub fn loopback() -> Self {
        Endpoint::Tcp(SocketAddr::from(([127, 0, 0, 1], 0)))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(addr) => write!(f, "tcp:{addr}"),
            Endpoint::Unix(path) => write!(f, "unix:{}", path.display()),
        }
    }
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(addr) = s.strip_prefix("tcp:") {
            addr.parse()
                .map(Endpoint::Tcp)
                .map_err(|e| format!("bad tcp endpoint {addr:?}: {e}"))
        } else if let Some(path) = s.strip_prefix("unix:") {
            Ok(Endpoint::Unix(PathBuf::from(path)))
        } else if s.starts_with('/') || s.starts_with('.') {
            Ok(Endpoint::Unix(PathBuf::from(s)))
        } else {
            Err(format!("endpoint must be tcp:HOST:PORT or unix:PATH, got {s:?}"))
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot bind event endpoint {endpoint}: {source}")]
    BindFailed {
        endpoint: String,
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub accepted: u64,
    pub rejected: u64,
    pub connections: u64,
}

#[derive(Default)]
struct Shared {
    events: Mutex<Vec<PhaseEvent>>,
    arrived: Condvar,
    accepted: AtomicU64,
    rejected: AtomicU64,
    connections: AtomicU64,
    stop: AtomicBool,
    readers: Mutex<Vec<JoinHandle<()>>>,
}

impl Shared {
    fn stats(&self) -> IngestStats {
        IngestStats {
            accepted: self.accepted.load(Ordering::SeqCst),
            rejected: self.rejected.load(Ordering::SeqCst),
            connections: self.connections.load(Ordering::SeqCst),
        }
    }
}

pub struct EventServer {
    endpoint: Endpoint,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

enum Listener {
    Tcp(TcpListener),
    Unix(UnixListener, PathBuf),
}

/// Binds `endpoint` and starts accepting connections in the background.
pub fn serve(endpoint: &Endpoint, clock: MonotonicClock) -> Result<EventServer, IngestError> {
    let bind_err = |source| IngestError::BindFailed {
        endpoint: endpoint.to_string(),
        source,
    };
    let (listener, bound) = match endpoint {
        Endpoint::Tcp(addr) => {
            let l = TcpListener::bind(addr).map_err(bind_err)?;
            let local = l.local_addr().map_err(bind_err)?;
            (Listener::Tcp(l), Endpoint::Tcp(local))
        }
        Endpoint::Unix(path) => {
            let l = UnixListener::bind(path).map_err(bind_err)?;
            (Listener::Unix(l, path.clone()), endpoint.clone())
        }
    };
    match &listener {
        Listener::Tcp(l) => l.set_nonblocking(true),
        Listener::Unix(l, _) => l.set_nonblocking(true),
    }
    .map_err(bind_err)?;

    let shared = Arc::new(Shared::default());
    let handshake = format!(
        "{{\"epoch_ns\":{},\"proto\":{PROTOCOL_VERSION}}}\n",
        clock.epoch_ns()
    );
    let acceptor = {
        let shared = Arc::clone(&shared);
        thread::Builder::new()
            .name("event-acceptor".into())
            .spawn(move || accept_loop(listener, shared, handshake))
            .expect("spawning acceptor")
    };
    Ok(EventServer {
        endpoint: bound,
        shared,
        acceptor: Some(acceptor),
    })
}

fn accept_loop(listener: Listener, shared: Arc<Shared>, handshake: String) {
    while !shared.stop.load(Ordering::SeqCst) {
        let accepted = match &listener {
            Listener::Tcp(l) => l.accept().map(|(s, _)| Conn::Tcp(s)),
            Listener::Unix(l, _) => l.accept().map(|(s, _)| Conn::Unix(s)),
        };
        match accepted {
            Ok(conn) => {
                shared.connections.fetch_add(1, Ordering::SeqCst);
                let reader_shared = Arc::clone(&shared);
                let handshake = handshake.clone();
                let join = thread::spawn(move || {
                    if let Err(e) = handle_connection(conn, &reader_shared, &handshake) {
                        log::debug!("event connection closed: {e}");
                    }
                });
                shared.readers.lock().unwrap().push(join);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
    if let Listener::Unix(_, path) = &listener {
        let _ = std::fs::remove_file(path);
    }
}

enum Conn {
    Tcp(TcpStream),
    Unix(UnixStream),
}

impl Conn {
    fn prepare(&self) -> io::Result<()> {
        match self {
            Conn::Tcp(s) => {
                s.set_nonblocking(false)?;
                s.set_read_timeout(Some(POLL))
            }
            Conn::Unix(s) => {
                s.set_nonblocking(false)?;
                s.set_read_timeout(Some(POLL))
            }
        }
    }
}

impl Read for Conn {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Conn::Tcp(s) => s.read(buf),
            Conn::Unix(s) => s.read(buf),
        }
    }
}

impl Write for Conn {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Conn::Tcp(s) => s.write(buf),
            Conn::Unix(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Conn::Tcp(s) => s.flush(),
            Conn::Unix(s) => s.flush(),
        }
    }
}

fn handle_connection(mut conn: Conn, shared: &Shared, handshake: &str) -> io::Result<()> {
    conn.prepare()?;
    conn.write_all(handshake.as_bytes())?;
    conn.flush()?;

    let mut splitter = LineSplitter::default();
    let mut chunk = [0u8; 8192];
    loop {
        match conn.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => splitter.push(&chunk[..n], |line| ingest_line(shared, line)),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if shared.stop.load(Ordering::SeqCst) {
                    break;
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    splitter.finish(|line| ingest_line(shared, line));
    Ok(())
}

enum Line<'a> {
    Complete(&'a [u8]),
    Oversized,
}

/// Splits a byte stream on `\n`, discarding lines longer than
/// [`MAX_LINE_BYTES`] without buffering them.
#[derive(Default)]
struct LineSplitter {
    buf: Vec<u8>,
    overflow: bool,
}

impl LineSplitter {
    fn push(&mut self, mut data: &[u8], mut emit: impl FnMut(Line<'_>)) {
        while !data.is_empty() {
            match data.iter().position(|&b| b == b'\n') {
                Some(pos) => {
                    self.append(&data[..pos]);
                    self.end_line(&mut emit);
                    data = &data[pos + 1..];
                }
                None => {
                    self.append(data);
                    data = &[];
                }
            }
        }
    }

    fn append(&mut self, data: &[u8]) {
        if self.overflow {
            return;
        }
        if self.buf.len() + data.len() > MAX_LINE_BYTES {
            self.overflow = true;
            self.buf.clear();
        } else {
            self.buf.extend_from_slice(data);
        }
    }

    fn end_line(&mut self, emit: &mut impl FnMut(Line<'_>)) {
        if self.overflow {
            emit(Line::Oversized);
        } else {
            emit(Line::Complete(&self.buf));
        }
        self.buf.clear();
        self.overflow = false;
    }

    fn finish(mut self, mut emit: impl FnMut(Line<'_>)) {
        if self.overflow || !self.buf.is_empty() {
            self.end_line(&mut emit);
        }
    }
}

fn ingest_line(shared: &Shared, line: Line<'_>) {
    let bytes = match line {
        Line::Oversized => {
            shared.rejected.fetch_add(1, Ordering::SeqCst);
            return;
        }
        Line::Complete(bytes) => bytes,
    };
    let text = match std::str::from_utf8(bytes) {
        Ok(t) => t.trim(),
        Err(_) => {
            shared.rejected.fetch_add(1, Ordering::SeqCst);
            return;
        }
    };
    if text.is_empty() {
        return;
    }
    match parse_event_line(text) {
        Ok(event) => {
            shared.events.lock().unwrap().push(event);
            shared.accepted.fetch_add(1, Ordering::SeqCst);
            shared.arrived.notify_all();
        }
        Err(e) => {
            log::debug!("rejected event line: {e}");
            shared.rejected.fetch_add(1, Ordering::SeqCst);
        }
    }
}

impl EventServer {
    /// The bound endpoint, with any ephemeral port resolved.
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn stats(&self) -> IngestStats {
        self.shared.stats()
    }

    /// Events received so far, in arrival order.
    pub fn events(&self) -> Vec<PhaseEvent> {
        self.shared.events.lock().unwrap().clone()
    }

    /// Blocks until `pred` holds for the received events or `timeout` elapses.
    pub fn wait_until(&self, timeout: Duration, pred: impl Fn(&[PhaseEvent]) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        let mut events = self.shared.events.lock().unwrap();
        loop {
            if pred(&events) {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            let (guard, _) = self
                .shared
                .arrived
                .wait_timeout(events, (deadline - now).min(POLL))
                .unwrap();
            events = guard;
        }
    }

    /// Stops accepting, drains open connections and returns every event in
    /// arrival order. Per-connection order is preserved; cross-connection
    /// merging by timestamp happens at validation.
    pub fn shutdown(mut self) -> (Vec<PhaseEvent>, IngestStats) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(acceptor) = self.acceptor.take() {
            let _ = acceptor.join();
        }
        let readers = std::mem::take(&mut *self.shared.readers.lock().unwrap());
        for r in readers {
            let _ = r.join();
        }
        let events = std::mem::take(&mut *self.shared.events.lock().unwrap());
        (events, self.shared.stats())
    }
}

impl Drop for EventServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(acceptor) = self.acceptor.take() {
            let _ = acceptor.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{to_event_line, EventKind};
    use std::io::{BufRead, BufReader};

    fn session(run: &str, req: &str, base: u64) -> Vec<PhaseEvent> {
        use EventKind::*;
        vec![
            PhaseEvent::run(base, run, RunStart),
            PhaseEvent::request(base + 1, run, req, PrefillStart).with_prompt_tokens(8),
            PhaseEvent::request(base + 2, run, req, PrefillEnd),
            PhaseEvent::request(base + 3, run, req, DecodeStart),
            PhaseEvent::request(base + 4, run, req, DecodeEnd),
            PhaseEvent::request(base + 5, run, req, RequestComplete).with_generated_tokens(4),
            PhaseEvent::run(base + 6, run, RunEnd),
        ]
    }

    fn send(endpoint: &Endpoint, lines: &[String]) -> String {
        let mut conn: Box<dyn ReadWrite> = match endpoint {
            Endpoint::Tcp(addr) => Box::new(TcpStream::connect(addr).unwrap()),
            Endpoint::Unix(path) => Box::new(UnixStream::connect(path).unwrap()),
        };
        let mut handshake = String::new();
        {
            let mut reader = BufReader::new(&mut conn);
            reader.read_line(&mut handshake).unwrap();
        }
        for l in lines {
            conn.write_all(l.as_bytes()).unwrap();
            conn.write_all(b"\n").unwrap();
        }
        handshake
    }

    trait ReadWrite: Read + Write {}
    impl<T: Read + Write> ReadWrite for T {}

    #[test]
    fn tcp_session_with_handshake() {
        let clock = MonotonicClock::from_epoch(123_456);
        let server = serve(&Endpoint::loopback(), clock).unwrap();
        let lines: Vec<String> = session("r1", "a", 10).iter().map(to_event_line).collect();
        let handshake = send(server.endpoint(), &lines);
        let hs: serde_json::Value = serde_json::from_str(&handshake).unwrap();
        assert_eq!(hs["epoch_ns"], 123_456);
        assert_eq!(hs["proto"], 1);
        assert!(server.wait_until(Duration::from_secs(5), |e| e.len() == 7));
        let (events, stats) = server.shutdown();
        assert_eq!(events, session("r1", "a", 10));
        assert_eq!(stats.accepted, 7);
        assert_eq!(stats.rejected, 0);
    }

    #[test]
    fn bad_lines_are_rejected_and_stream_survives() {
        let dir = tempfile::tempdir().unwrap();
        let sock = Endpoint::Unix(dir.path().join("ev.sock"));
        let server = serve(&sock, MonotonicClock::start()).unwrap();
        let mut lines: Vec<String> = session("r1", "a", 0).iter().map(to_event_line).collect();
        lines.insert(2, r#"{"ts_ns":1,"run_id":"r1","request_id":"a","kind":"Mystery"}"#.into());
        lines.insert(3, "x".repeat(MAX_LINE_BYTES + 10));
        lines.insert(4, "{not json".into());
        send(server.endpoint(), &lines);
        assert!(server.wait_until(Duration::from_secs(5), |e| e.len() == 7));
        // give the reader a moment to count the trailing rejects
        thread::sleep(Duration::from_millis(50));
        let (events, stats) = server.shutdown();
        assert_eq!(events.len(), 7);
        assert_eq!(stats.rejected, 3);
    }

    #[test]
    fn interleaved_connections_merge_by_timestamp() {
        let server = serve(&Endpoint::loopback(), MonotonicClock::start()).unwrap();
        use EventKind::*;
        let conn_a: Vec<PhaseEvent> = vec![
            PhaseEvent::run(0, "r", RunStart),
            PhaseEvent::request(10, "r", "a", PrefillStart).with_prompt_tokens(4),
            PhaseEvent::request(30, "r", "a", PrefillEnd),
            PhaseEvent::run(100, "r", RunEnd),
        ];
        let conn_b: Vec<PhaseEvent> = vec![
            PhaseEvent::request(5, "r", "b", PrefillStart).with_prompt_tokens(2),
            PhaseEvent::request(20, "r", "b", PrefillEnd),
            PhaseEvent::request(40, "r", "b", DecodeStart),
        ];
        let ep = server.endpoint().clone();
        let la: Vec<String> = conn_a.iter().map(to_event_line).collect();
        let lb: Vec<String> = conn_b.iter().map(to_event_line).collect();
        let ep2 = ep.clone();
        let t = thread::spawn(move || send(&ep2, &lb));
        send(&ep, &la);
        t.join().unwrap();
        assert!(server.wait_until(Duration::from_secs(5), |e| e.len() == 7));
        let (mut merged, stats) = server.shutdown();
        assert_eq!(stats.connections, 2);
        merged.sort_by_key(|e| e.ts_ns);

        let mut offline: Vec<PhaseEvent> = conn_a.into_iter().chain(conn_b).collect();
        offline.sort_by_key(|e| e.ts_ns);
        assert_eq!(merged, offline);
    }

    #[test]
    fn endpoint_strings() {
        let e: Endpoint = "tcp:127.0.0.1:9000".parse().unwrap();
        assert_eq!(e.to_string(), "tcp:127.0.0.1:9000");
        let u: Endpoint = "unix:/tmp/x.sock".parse().unwrap();
        assert_eq!(u, Endpoint::Unix("/tmp/x.sock".into()));
        assert_eq!("/tmp/y".parse::<Endpoint>().unwrap(), Endpoint::Unix("/tmp/y".into()));
        assert!("localhost".parse::<Endpoint>().is_err());
    }

    #[test]
    fn bind_failure_is_reported() {
        let e = Endpoint::Unix("/nonexistent-dir/sock".into());
        assert!(matches!(
            serve(&e, MonotonicClock::start()),
            Err(IngestError::BindFailed { .. })
        ));
    }

    #[test]
    fn splitter_handles_chunk_boundaries() {
        let mut got = Vec::new();
        let mut sp = LineSplitter::default();
        let mut collect = |l: Line<'_>| match l {
            Line::Complete(b) => got.push(String::from_utf8(b.to_vec()).unwrap()),
            Line::Oversized => got.push("<oversized>".into()),
        };
        sp.push(b"ab", &mut collect);
        sp.push(b"c\nde", &mut collect);
        sp.push(b"f\n", &mut collect);
        sp.push(b"tail", &mut collect);
        sp.finish(&mut collect);
        assert_eq!(got, vec!["abc", "def", "tail"]);
    }
}

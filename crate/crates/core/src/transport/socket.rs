//! TCP transport: one persistent connection per ordered node pair.
//!
//! A connection starts with the connecting node's id as `u32` little-endian;
//! after that it carries frames exactly as produced by
//! [`crate::wire::encode`].

use std::io::{BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;

use super::{EnvelopeCounters, Transport};
use crate::error::{Error, Result};
use crate::model::NodeId;

/// Largest frame body accepted from the network.
const MAX_FRAME: usize = 1 << 30;

/// Node addresses, indexed by node id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub addrs: Vec<String>,
}

impl Manifest {
    pub fn num_nodes(&self) -> u32 {
        self.addrs.len() as u32
    }
}

/// Parses `node_id host:port` lines. Blank lines and `#` comments are
/// ignored; ids must cover `0..n` exactly once.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut entries: Vec<(u32, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: String| Error::Config(format!("manifest line {line_no}: {m}"));
        let mut parts = line.split_whitespace();
        let (Some(id), Some(addr), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(format!("expected `node_id host:port`, got `{line}`")));
        };
        let id: u32 = id.parse().map_err(|_| bad(format!("bad node id `{id}`")))?;
        if !addr.contains(':') {
            return Err(bad(format!("address `{addr}` lacks a port")));
        }
        if entries.iter().any(|(e, _, _)| *e == id) {
            return Err(bad(format!("node {id} listed twice")));
        }
        entries.push((id, addr.to_string(), line_no));
    }
    entries.sort();
    for (want, (id, _, line)) in entries.iter().enumerate() {
        if *id as usize != want {
            return Err(Error::Config(format!(
                "manifest line {line}: node ids must be 0..{}, found {id}",
                entries.len()
            )));
        }
    }
    if entries.is_empty() {
        return Err(Error::Config("manifest lists no nodes".into()));
    }
    Ok(Manifest {
        addrs: entries.into_iter().map(|(_, a, _)| a).collect(),
    })
}

/// Connection retry policy.
#[derive(Clone, Debug)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 60,
            initial_backoff: Duration::from_millis(20),
            max_backoff: Duration::from_secs(1),
        }
    }
}

/// A bound listener waiting to be connected to its peers.
pub struct PendingSocket {
    node: NodeId,
    listener: TcpListener,
}

impl PendingSocket {
    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections from every peer and connects to every peer.
    pub fn connect(self, manifest: &Manifest, retry: &RetryPolicy) -> Result<SocketTransport> {
        let n = manifest.num_nodes();
        if self.node.0 >= n {
            return Err(Error::Config(format!("node {} not in manifest of {n}", self.node)));
        }
        let (tx, rx) = unbounded();
        let closed = Arc::new(AtomicBool::new(false));
        let readers: Arc<Mutex<Vec<TcpStream>>> = Arc::default();

        {
            let tx = tx.clone();
            let closed = closed.clone();
            let readers = readers.clone();
            let listener = self.listener;
            let expected = n as usize - 1;
            thread::Builder::new()
                .name(format!("accept-{}", self.node))
                .spawn(move || accept_loop(listener, expected, tx, closed, readers))?;
        }

        let mut writers = Vec::with_capacity(n as usize);
        for peer in 0..n {
            if peer == self.node.0 {
                writers.push(None);
                continue;
            }
            let stream = connect_with_retry(&manifest.addrs[peer as usize], NodeId(peer), retry)?;
            stream.set_nodelay(true)?;
            let mut w = BufWriter::new(stream);
            w.write_all(&self.node.0.to_le_bytes())?;
            w.flush()?;
            writers.push(Some(Mutex::new(w)));
        }
        Ok(SocketTransport {
            node: self.node,
            writers,
            loopback: tx,
            inbox: rx,
            closed,
            readers,
            counters: EnvelopeCounters::default(),
        })
    }
}

fn connect_with_retry(addr: &str, peer: NodeId, retry: &RetryPolicy) -> Result<TcpStream> {
    let mut backoff = retry.initial_backoff;
    for attempt in 1..=retry.attempts.max(1) {
        let resolved = addr.to_socket_addrs().ok().and_then(|mut a| a.next());
        if let Some(sa) = resolved {
            match TcpStream::connect_timeout(&sa, Duration::from_secs(2)) {
                Ok(s) => return Ok(s),
                Err(e) => log::info!("connect to node {peer} at {addr}, attempt {attempt}: {e}"),
            }
        }
        if attempt < retry.attempts {
            thread::sleep(backoff);
            backoff = (backoff * 2).min(retry.max_backoff);
        }
    }
    Err(Error::PeerUnreachable {
        peer,
        attempts: retry.attempts,
    })
}

fn accept_loop(
    listener: TcpListener,
    expected: usize,
    tx: Sender<(NodeId, Vec<u8>)>,
    closed: Arc<AtomicBool>,
    readers: Arc<Mutex<Vec<TcpStream>>>,
) {
    let mut accepted = 0;
    while accepted < expected && !closed.load(Ordering::Acquire) {
        let Ok((mut stream, _)) = listener.accept() else {
            continue;
        };
        let mut id = [0u8; 4];
        if stream.read_exact(&mut id).is_err() {
            continue;
        }
        let peer = NodeId(u32::from_le_bytes(id));
        accepted += 1;
        if let Ok(clone) = stream.try_clone() {
            readers.lock().push(clone);
        }
        let tx = tx.clone();
        let _ = thread::Builder::new()
            .name(format!("read-{peer}"))
            .spawn(move || read_loop(stream, peer, tx));
    }
}

fn read_loop(mut stream: TcpStream, peer: NodeId, tx: Sender<(NodeId, Vec<u8>)>) {
    loop {
        let mut len = [0u8; 4];
        if stream.read_exact(&mut len).is_err() {
            return;
        }
        let n = u32::from_le_bytes(len) as usize;
        if n > MAX_FRAME {
            log::warn!("dropping connection from node {peer}: frame of {n} bytes");
            return;
        }
        let mut frame = vec![0u8; 4 + n];
        frame[..4].copy_from_slice(&len);
        if stream.read_exact(&mut frame[4..]).is_err() {
            return;
        }
        if tx.send((peer, frame)).is_err() {
            return;
        }
    }
}

pub struct SocketTransport {
    node: NodeId,
    writers: Vec<Option<Mutex<BufWriter<TcpStream>>>>,
    loopback: Sender<(NodeId, Vec<u8>)>,
    inbox: Receiver<(NodeId, Vec<u8>)>,
    closed: Arc<AtomicBool>,
    readers: Arc<Mutex<Vec<TcpStream>>>,
    counters: EnvelopeCounters,
}

impl SocketTransport {
    /// Binds the listening socket of `node`.
    pub fn listen(node: NodeId, addr: &str) -> Result<PendingSocket> {
        Ok(PendingSocket {
            node,
            listener: TcpListener::bind(addr)?,
        })
    }

    /// Binds at the manifest address of `node` and connects to all peers.
    pub fn start(node: NodeId, manifest: &Manifest, retry: &RetryPolicy) -> Result<Self> {
        let addr = manifest
            .addrs
            .get(node.index())
            .ok_or_else(|| Error::Config(format!("node {node} not in manifest")))?;
        Self::listen(node, addr)?.connect(manifest, retry)
    }
}

impl Transport for SocketTransport {
    fn node(&self) -> NodeId {
        self.node
    }

    fn num_nodes(&self) -> u32 {
        self.writers.len() as u32
    }

    fn send(&self, to: NodeId, frame: Vec<u8>) -> Result<()> {
        self.counters.observe(&frame);
        if to == self.node {
            return self.loopback.send((to, frame)).map_err(|_| Error::TransportClosed);
        }
        let w = self
            .writers
            .get(to.index())
            .and_then(|w| w.as_ref())
            .ok_or_else(|| Error::InvalidArgument(format!("no peer {to}")))?;
        let mut w = w.lock();
        w.write_all(&frame)
            .and_then(|_| w.flush())
            .map_err(|e| Error::Remote(format!("send to node {to}: {e}")))
    }

    fn recv_timeout(&self, timeout: Duration) -> Result<Option<(NodeId, Vec<u8>)>> {
        match self.inbox.recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(Error::TransportClosed),
        }
    }

    fn counters(&self) -> &EnvelopeCounters {
        &self.counters
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        self.closed.store(true, Ordering::Release);
        for w in self.writers.iter().flatten() {
            let _ = w.lock().get_ref().shutdown(Shutdown::Both);
        }
        for r in self.readers.lock().iter() {
            let _ = r.shutdown(Shutdown::Both);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("# cluster\n1 10.0.0.2:7000\n0 10.0.0.1:7000 # first\n\n").unwrap();
        assert_eq!(m.addrs, vec!["10.0.0.1:7000", "10.0.0.2:7000"]);
        for bad in ["0 a:1\n0 b:2", "0 a:1\n2 b:2", "x a:1", "0 nohost", "0 a:1 extra", ""] {
            assert!(parse_manifest(bad).is_err(), "{bad:?}");
        }
        let err = parse_manifest("0 a:1\nzz b:1").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn unreachable_peer_reports_attempts() {
        let retry = RetryPolicy {
            attempts: 2,
            initial_backoff: Duration::from_millis(1),
            max_backoff: Duration::from_millis(1),
        };
        // port 1 on localhost is essentially never listening
        let err = connect_with_retry("127.0.0.1:1", NodeId(3), &retry).unwrap_err();
        assert!(matches!(
            err,
            Error::PeerUnreachable {
                peer: NodeId(3),
                attempts: 2
            }
        ));
    }
}

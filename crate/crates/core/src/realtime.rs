//! Nodes driven by wall-clock rounds over a real transport.
//!
//! Each node runs one sync driver, one dispatcher thread and its worker
//! threads. The sync driver sends exactly one request and one response
//! envelope to every peer in every round, empty ones included, so that a
//! round completes once every peer has been heard from. A request carries
//! [`FLAG_IDLE`] when its sender sent nothing else in that round and has
//! nothing left to do; once every node's requests of a round are idle, all
//! nodes stop after the same round.
//!
//! The dispatcher receives every frame. Round envelopes go to the sync
//! driver; synchronous reads are served (or forwarded) immediately so that a
//! worker waiting on a read never depends on the round schedule.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;

use crate::client::{Client, RemoteAccess, RemoteRead};
use crate::config::ClusterConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsSnapshot;
use crate::model::{Key, NodeId, RoundIndex};
use crate::node::Node;
use crate::routing::MAX_HOPS;
use crate::transport::{LoopbackHub, Transport};
use crate::wire::{self, Envelope, EnvelopeKind, Frame, ReadEntry, ReadReply, ReadRequest, FLAG_IDLE};

/// Marks a read entry that hit the hop limit; the reader retries it.
const RETRY_HOPS: u8 = u8::MAX;

#[derive(Clone, Debug)]
pub struct RealtimeOptions {
    pub rounds_per_sec: Option<f64>,
    /// How long to wait for a peer's envelope before giving up.
    pub phase_timeout: Duration,
    pub max_rounds: Option<u64>,
    /// How often a read that hit a relocation in progress is retried.
    pub read_retries: u32,
}

impl Default for RealtimeOptions {
    fn default() -> Self {
        RealtimeOptions {
            rounds_per_sec: None,
            phase_timeout: Duration::from_secs(30),
            max_rounds: None,
            read_retries: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NodeReport {
    pub node: NodeId,
    pub rounds: RoundIndex,
    pub metrics: MetricsSnapshot,
    /// Final values of the keys this node owns.
    pub owned: Vec<(Key, Vec<f32>)>,
    pub max_envelopes_per_pair: u64,
    pub elapsed: Duration,
}

#[derive(Default)]
struct ReadHub {
    next_id: AtomicU64,
    waiting: Mutex<HashMap<u64, Sender<ReadReply>>>,
}

/// Remote reads through the transport.
struct RealtimeRemote<'a> {
    transport: &'a dyn Transport,
    hub: &'a ReadHub,
    timeout: Duration,
    retries: u32,
}

impl RealtimeRemote<'_> {
    fn exchange(&self, from: &Node, target: NodeId, keys: &[Key]) -> Result<Vec<ReadEntry>> {
        let id = self.hub.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = unbounded();
        self.hub.waiting.lock().insert(id, tx);
        let frame = wire::encode(&Frame::Read(ReadRequest {
            id,
            origin: from.id(),
            hops: 1,
            keys: keys.to_vec(),
        }));
        from.count_read_bytes(frame.len());
        let sent = self.transport.send(target, frame);
        let mut entries = Vec::with_capacity(keys.len());
        let result = sent.and_then(|_| {
            let deadline = Instant::now() + self.timeout;
            while entries.len() < keys.len() {
                let left = deadline.saturating_duration_since(Instant::now());
                match rx.recv_timeout(left) {
                    Ok(reply) => entries.extend(reply.entries),
                    Err(_) => return Err(Error::Remote(format!("read {id} timed out at node {target}"))),
                }
            }
            Ok(())
        });
        self.hub.waiting.lock().remove(&id);
        result.map(|_| entries)
    }
}

impl RemoteAccess for RealtimeRemote<'_> {
    fn read(&self, from: &Node, target: NodeId, keys: &[Key]) -> Result<RemoteRead> {
        let mut values: HashMap<Key, Vec<f32>> = HashMap::with_capacity(keys.len());
        let mut todo: Vec<Key> = keys.to_vec();
        todo.sort_unstable();
        todo.dedup();
        let mut target = target;
        for attempt in 0..=self.retries {
            let mut retry = Vec::new();
            for e in self.exchange(from, target, &todo)? {
                if e.hops == RETRY_HOPS {
                    retry.push(e.key);
                    continue;
                }
                from.metrics().record_hops(e.hops);
                from.learn_owner(e.key, e.owner);
                values.insert(e.key, e.value);
            }
            if retry.is_empty() {
                return Ok(RemoteRead {
                    values: keys.iter().map(|k| values[k].clone()).collect(),
                    cost_us: 0.0,
                });
            }
            // a relocation is being installed; let the rounds catch up
            thread::sleep(Duration::from_micros(200 << attempt.min(6)));
            todo = retry;
            target = from.route_target(todo[0]);
        }
        Err(Error::RoutingLoop {
            key: todo[0],
            hops: MAX_HOPS as u32,
        })
    }
}

/// Serves or forwards a read arriving at `node`.
fn serve_read(node: &Node, transport: &dyn Transport, hub: &ReadHub, req: ReadRequest) -> Result<()> {
    let mut reply = Vec::new();
    let mut forward: HashMap<NodeId, Vec<Key>> = HashMap::new();
    for &key in &req.keys {
        match node.serve_read(key) {
            Ok(value) => reply.push(ReadEntry {
                key,
                owner: node.id(),
                hops: req.hops,
                value,
            }),
            Err(_) if req.hops >= MAX_HOPS => reply.push(ReadEntry {
                key,
                owner: node.id(),
                hops: RETRY_HOPS,
                value: Vec::new(),
            }),
            Err(next) => forward.entry(next).or_default().push(key),
        }
    }
    for (next, keys) in forward {
        let f = wire::encode(&Frame::Read(ReadRequest {
            id: req.id,
            origin: req.origin,
            hops: req.hops + 1,
            keys,
        }));
        node.count_read_bytes(f.len());
        node.metrics().add(&node.metrics().forwards, 1);
        transport.send(next, f)?;
    }
    if !reply.is_empty() {
        let r = ReadReply {
            id: req.id,
            entries: reply,
        };
        if req.origin == node.id() {
            deliver(hub, r);
        } else {
            let f = wire::encode(&Frame::ReadReply(r));
            node.count_read_bytes(f.len());
            transport.send(req.origin, f)?;
        }
    }
    Ok(())
}

fn deliver(hub: &ReadHub, reply: ReadReply) {
    if let Some(tx) = hub.waiting.lock().get(&reply.id) {
        let _ = tx.send(reply);
    }
}

fn dispatch(
    node: &Node,
    transport: &dyn Transport,
    hub: &ReadHub,
    envelopes: Sender<Envelope>,
    stop: &AtomicBool,
) -> Result<()> {
    while !stop.load(Ordering::Acquire) {
        let Some((_, bytes)) = transport.recv_timeout(Duration::from_millis(20))? else {
            continue;
        };
        match wire::decode(&bytes)? {
            Frame::Envelope(e) => {
                if envelopes.send(e).is_err() {
                    return Ok(());
                }
            }
            Frame::Read(r) => serve_read(node, transport, hub, r)?,
            Frame::ReadReply(r) => deliver(hub, r),
        }
    }
    Ok(())
}

struct RoundInbox {
    rx: Receiver<Envelope>,
    early: HashMap<(bool, RoundIndex), Vec<Envelope>>,
    timeout: Duration,
}

impl RoundInbox {
    /// Waits for one envelope of `kind` and `round` from every peer.
    fn wait(&mut self, kind: EnvelopeKind, round: RoundIndex, peers: usize) -> Result<Vec<Envelope>> {
        let slot = (kind == EnvelopeKind::Request, round);
        let mut got = self.early.remove(&slot).unwrap_or_default();
        let deadline = Instant::now() + self.timeout;
        while got.len() < peers {
            let left = deadline.saturating_duration_since(Instant::now());
            let e = self.rx.recv_timeout(left).map_err(|_| {
                Error::Remote(format!(
                    "round {round}: heard from {} of {peers} peers within {:?}",
                    got.len(),
                    self.timeout
                ))
            })?;
            if (e.kind == EnvelopeKind::Request, e.round) == slot {
                got.push(e);
            } else {
                self.early
                    .entry((e.kind == EnvelopeKind::Request, e.round))
                    .or_default()
                    .push(e);
            }
        }
        got.sort_by_key(|e| e.from);
        Ok(got)
    }
}

/// Sends one envelope to every peer, filling gaps with empty ones.
fn send_round(
    node: &Node,
    transport: &dyn Transport,
    envs: Vec<Envelope>,
    kind: EnvelopeKind,
    round: RoundIndex,
    idle: bool,
) -> Result<()> {
    let mut by_peer: HashMap<NodeId, Envelope> = envs.into_iter().map(|e| (e.to, e)).collect();
    for p in 0..transport.num_nodes() {
        let to = NodeId(p);
        if to == node.id() {
            continue;
        }
        let e = by_peer.remove(&to).unwrap_or_else(|| {
            let mut e = Envelope::new(node.id(), to, round, kind);
            if idle {
                e.flags |= FLAG_IDLE;
            }
            e
        });
        let f = wire::encode(&Frame::Envelope(e));
        node.count_sent(kind, f.len());
        transport.send(to, f)?;
    }
    Ok(())
}

fn sync_loop(
    node: &Node,
    transport: &dyn Transport,
    mut inbox: RoundInbox,
    opts: &RealtimeOptions,
    started: Instant,
) -> Result<RoundIndex> {
    let peers = transport.num_nodes() as usize - 1;
    let period = opts
        .rounds_per_sec
        .filter(|r| *r > 0.0)
        .map(|r| Duration::from_secs_f64(1.0 / r));
    let mut round: RoundIndex = 0;
    let mut sent_idle = false;
    loop {
        let round_start = Instant::now();
        round += 1;
        if opts.max_rounds.is_some_and(|m| round > m) {
            return Err(Error::Config(format!(
                "node {} exceeded {} rounds",
                node.id(),
                round - 1
            )));
        }
        node.begin_round(round);
        node.set_now(started.elapsed().as_secs_f64() * 1e6);

        let requests = if round > 1 {
            inbox.wait(EnvelopeKind::Request, round - 1, peers)?
        } else {
            Vec::new()
        };
        if round > 1 && sent_idle && requests.iter().all(|e| e.is_idle()) {
            return Ok(round - 1);
        }
        let requests: Vec<Envelope> = requests.into_iter().filter(|e| !e.sections.is_empty()).collect();
        let responses = node.handle_requests(requests);
        send_round(node, transport, responses, EnvelopeKind::Response, round, false)?;

        let responses = inbox.wait(EnvelopeKind::Response, round, peers)?;
        let responses = responses.into_iter().filter(|e| !e.sections.is_empty()).collect();
        node.handle_responses(responses);

        let requests = node.build_requests();
        sent_idle = requests.is_empty() && node.is_idle();
        send_round(node, transport, requests, EnvelopeKind::Request, round, sent_idle)?;

        if let Some(p) = period {
            let spent = round_start.elapsed();
            if spent < p {
                thread::sleep(p - spent);
            }
        }
    }
}

/// Runs one node until every node's workers are done and the cluster is
/// quiet. `work` runs once per local worker on its own thread.
pub fn run_node<F>(node: &Node, transport: &dyn Transport, opts: &RealtimeOptions, work: F) -> Result<NodeReport>
where
    F: Fn(&Client, u16) -> Result<()> + Sync,
{
    let started = Instant::now();
    let hub = ReadHub::default();
    let stop = AtomicBool::new(false);
    let (env_tx, env_rx) = unbounded();
    let remote = RealtimeRemote {
        transport,
        hub: &hub,
        timeout: opts.phase_timeout,
        retries: opts.read_retries,
    };
    let workers = node.config().workers_per_node;

    let rounds = thread::scope(|s| -> Result<RoundIndex> {
        let dispatcher = s.spawn(|| dispatch(node, transport, &hub, env_tx, &stop));
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (remote, work) = (&remote, &work);
                s.spawn(move || {
                    let client = Client::new(node, remote);
                    let r = work(&client, w);
                    client.retire(w);
                    r
                })
            })
            .collect();
        let inbox = RoundInbox {
            rx: env_rx,
            early: HashMap::new(),
            timeout: opts.phase_timeout,
        };
        let rounds = sync_loop(node, transport, inbox, opts, started);
        if rounds.is_err() {
            for w in 0..workers {
                node.retire_worker(w);
            }
        }
        let mut first_err = None;
        for h in handles {
            if let Err(e) = h.join().expect("worker panicked") {
                first_err.get_or_insert(e);
            }
        }
        stop.store(true, Ordering::Release);
        if let Err(e) = dispatcher.join().expect("dispatcher panicked") {
            first_err.get_or_insert(e);
        }
        let rounds = rounds?;
        match first_err {
            Some(e) => Err(e),
            None => Ok(rounds),
        }
    })?;

    let owned = (0..node.config().num_keys)
        .filter_map(|k| node.owned_value(Key(k)).map(|v| (Key(k), v)))
        .collect();
    Ok(NodeReport {
        node: node.id(),
        rounds,
        metrics: node.metrics().snapshot(),
        owned,
        max_envelopes_per_pair: transport.counters().max_per_pair(),
        elapsed: started.elapsed(),
    })
}

/// Result of an in-process multi-threaded run.
#[derive(Clone, Debug)]
pub struct LocalRun {
    pub nodes: Vec<NodeReport>,
    pub final_values: Vec<Vec<f32>>,
}

impl LocalRun {
    pub fn total_metrics(&self) -> MetricsSnapshot {
        let mut t = MetricsSnapshot::default();
        for n in &self.nodes {
            t.accumulate(&n.metrics);
        }
        t
    }
}

/// Runs all nodes of `cfg` as threads of this process over the loopback
/// transport. `work` receives the client and the worker's node-local index.
pub fn run_local<F>(cfg: ClusterConfig, opts: &RealtimeOptions, work: F) -> Result<LocalRun>
where
    F: Fn(&Client, u16) -> Result<()> + Sync,
{
    cfg.validate()?;
    let cfg = Arc::new(cfg);
    let nodes: Vec<Node> = (0..cfg.num_nodes).map(|i| Node::new(NodeId(i), cfg.clone())).collect();
    let transports = LoopbackHub::build(cfg.num_nodes);
    let reports = thread::scope(|s| {
        let handles: Vec<_> = nodes
            .iter()
            .zip(&transports)
            .map(|(n, t)| {
                let work = &work;
                s.spawn(move || run_node(n, t, opts, work))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("node thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut final_values = vec![Vec::new(); cfg.num_keys as usize];
    for r in &reports {
        for (k, v) in &r.owned {
            final_values[k.index()] = v.clone();
        }
    }
    Ok(LocalRun {
        nodes: reports,
        final_values,
    })
}

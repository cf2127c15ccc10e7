//! Deterministic multi-node simulator.
//!
//! All nodes live in one process and exchange real encoded frames through a
//! loopback hub, but phases advance in lockstep: every node finishes phase
//! B (requests in, responses out) before any node starts phase C, and so on.
//! Between steps the caller runs workers for the step's time window. Time is
//! simulated: a round lasts a fixed overhead plus the largest per-node
//! transfer at the configured bandwidth.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::client::{RemoteAccess, RemoteRead};
use crate::config::ClusterConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsSnapshot;
use crate::model::{Key, NodeId, RoundIndex};
use crate::node::{Event, Node};
use crate::par;
use crate::routing::MAX_HOPS;
use crate::transport::{EnvelopeCounters, LoopbackHub, LoopbackTransport, Transport};
use crate::wire::{self, Envelope, Frame, ReadEntry, ReadReply, ReadRequest};

/// Owner and replica holders of one traced key after one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub round: RoundIndex,
    pub key: Key,
    pub owner: NodeId,
    pub holders: Vec<NodeId>,
}

/// Results of the per-round consistency checks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InvariantReport {
    pub rounds_checked: u64,
    /// Rounds in which some key had zero or several main copies.
    pub ownership_violations: u64,
    /// Replicas found without active intent and without an unanswered end.
    pub replica_violations: u64,
    /// Owner holder lists that disagree with the replicas that exist.
    pub holder_mismatches: u64,
    /// First few violations, for diagnostics.
    pub examples: Vec<String>,
}

impl InvariantReport {
    pub fn is_clean(&self) -> bool {
        self.ownership_violations == 0 && self.replica_violations == 0 && self.holder_mismatches == 0
    }

    fn note(&mut self, msg: String) {
        if self.examples.len() < 8 {
            self.examples.push(msg);
        }
    }
}

/// What one step did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub round: RoundIndex,
    pub frames: usize,
    pub max_node_bytes: u64,
    pub duration_us: f64,
    pub window_start_us: f64,
}

pub struct SimCluster {
    cfg: Arc<ClusterConfig>,
    nodes: Vec<Node>,
    endpoints: Vec<LoopbackTransport>,
    counters: Arc<EnvelopeCounters>,
    round: RoundIndex,
    window_end_us: f64,
    trace_keys: Vec<Key>,
    trace: Vec<TraceRow>,
    events: Vec<Event>,
    invariants: InvariantReport,
}

impl SimCluster {
    pub fn new(cfg: ClusterConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg = Arc::new(cfg);
        let nodes: Vec<Node> = (0..cfg.num_nodes).map(|i| Node::new(NodeId(i), cfg.clone())).collect();
        let endpoints = LoopbackHub::build(cfg.num_nodes);
        let counters = endpoints[0].shared_counters();
        Ok(SimCluster {
            cfg,
            nodes,
            endpoints,
            counters,
            round: 0,
            window_end_us: 0.0,
            trace_keys: Vec::new(),
            trace: Vec::new(),
            events: Vec::new(),
            invariants: InvariantReport::default(),
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    /// Rounds completed so far.
    pub fn round(&self) -> RoundIndex {
        self.round
    }

    /// End of the current worker window in simulated microseconds.
    pub fn now_us(&self) -> f64 {
        self.window_end_us
    }

    pub fn counters(&self) -> &EnvelopeCounters {
        &self.counters
    }

    pub fn invariants(&self) -> &InvariantReport {
        &self.invariants
    }

    pub fn set_trace_keys(&mut self, keys: Vec<Key>) {
        self.trace_keys = keys;
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    /// Placement events recorded so far (needs `record_events`).
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Runs `f` once per node, in parallel if configured.
    pub fn for_each_node<R, F>(&self, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(&Node) -> R + Sync + Send,
    {
        par::map(self.cfg.execution, &self.nodes, f)
    }

    /// Delivers queued frames of every node, decoded.
    fn collect_inboxes(&self) -> Result<Vec<Vec<Envelope>>> {
        self.endpoints
            .iter()
            .map(|ep| {
                ep.drain()
                    .into_iter()
                    .map(|(_, bytes)| match wire::decode(&bytes)? {
                        Frame::Envelope(e) => Ok(e),
                        other => Err(Error::Decode(format!("unexpected frame in round exchange: {other:?}"))),
                    })
                    .collect()
            })
            .collect()
    }

    fn send_all(&self, batches: Vec<Vec<Envelope>>, bytes: &mut [u64]) -> Result<usize> {
        let mut frames = 0;
        for (i, envs) in batches.into_iter().enumerate() {
            let node = &self.nodes[i];
            for e in envs {
                let buf = wire::encode(&Frame::Envelope(e.clone()));
                node.count_sent(e.kind, buf.len());
                bytes[i] += buf.len() as u64;
                self.endpoints[i].send(e.to, buf)?;
                frames += 1;
            }
        }
        Ok(frames)
    }

    /// One communication round: apply requests and answer them, apply the
    /// answers, then assemble the next requests.
    pub fn step(&mut self) -> Result<StepStats> {
        self.round += 1;
        let round = self.round;
        let start = self.window_end_us;
        let exec = self.cfg.execution;
        for n in &self.nodes {
            n.begin_round(round);
            n.set_now(start);
        }
        let mut bytes = vec![0u64; self.nodes.len()];

        let requests = self.collect_inboxes()?;
        let responses = par::map_with(exec, &self.nodes, requests, |n, envs| n.handle_requests(envs));
        let mut frames = self.send_all(responses, &mut bytes)?;

        let responses = self.collect_inboxes()?;
        par::map_with(exec, &self.nodes, responses, |n, envs| n.handle_responses(envs));

        let requests = par::map(exec, &self.nodes, |n| n.build_requests());
        frames += self.send_all(requests, &mut bytes)?;

        let max_node_bytes = bytes.iter().copied().max().unwrap_or(0);
        let duration_us = self.cfg.sim.round_duration_us(max_node_bytes);
        self.window_end_us = start + duration_us;

        if self.cfg.record_events {
            for n in &self.nodes {
                self.events.extend(n.take_events());
            }
        }
        if !self.trace_keys.is_empty() {
            self.record_trace();
        }
        if self.cfg.check_invariants {
            self.check();
        }
        self.counters.forget_before(round.saturating_sub(2));
        Ok(StepStats {
            round,
            frames,
            max_node_bytes,
            duration_us,
            window_start_us: start,
        })
    }

    /// Owner of `key` by scanning every node.
    pub fn owner_of(&self, key: Key) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.store().owns(key)).map(|n| n.id())
    }

    fn record_trace(&mut self) {
        for &key in &self.trace_keys {
            let Some(owner) = self.owner_of(key) else { continue };
            let mut holders = self.nodes[owner.index()].holders_of(key).unwrap_or_default();
            holders.sort_unstable();
            self.trace.push(TraceRow {
                round: self.round,
                key,
                owner,
                holders,
            });
        }
    }

    fn check(&mut self) {
        let mut report = std::mem::take(&mut self.invariants);
        report.rounds_checked += 1;
        let mut ownership_bad = false;
        let mut holders_bad = false;
        for k in 0..self.cfg.num_keys {
            let key = Key(k);
            let owners: Vec<NodeId> = self
                .nodes
                .iter()
                .filter(|n| n.store().owns(key))
                .map(|n| n.id())
                .collect();
            if owners.len() != 1 {
                if !ownership_bad {
                    report.note(format!("round {}: key {key} owned by {owners:?}", self.round));
                }
                ownership_bad = true;
                continue;
            }
            let mut recorded = self.nodes[owners[0].index()].holders_of(key).unwrap_or_default();
            recorded.sort_unstable();
            let actual: Vec<NodeId> = self
                .nodes
                .iter()
                .filter(|n| n.store().has_replica(key))
                .map(|n| n.id())
                .collect();
            if recorded != actual {
                if !holders_bad {
                    report.note(format!(
                        "round {}: key {key} holders {recorded:?} but replicas at {actual:?}",
                        self.round
                    ));
                }
                holders_bad = true;
            }
        }
        report.ownership_violations += ownership_bad as u64;
        report.holder_mismatches += holders_bad as u64;
        for n in &self.nodes {
            let bad = n.replica_violations();
            if let Some(k) = bad.first() {
                report.note(format!(
                    "round {}: node {} holds replica of key {k} without intent",
                    self.round,
                    n.id()
                ));
            }
            report.replica_violations += bad.len() as u64;
        }
        self.invariants = report;
    }

    /// Runs rounds until nothing is sent in a round and every node is idle.
    /// Returns the number of rounds run.
    pub fn run_until_quiescent(&mut self, max_rounds: u64) -> Result<u64> {
        for i in 1..=max_rounds {
            let s = self.step()?;
            if s.frames == 0 && self.nodes.iter().all(|n| n.is_idle()) {
                return Ok(i);
            }
        }
        Err(Error::Config(format!(
            "cluster not quiescent after {max_rounds} rounds"
        )))
    }

    /// Runs rounds until one sends nothing, without requiring idle workers.
    pub fn run_until_silent(&mut self, max_rounds: u64) -> Result<u64> {
        for i in 1..=max_rounds {
            if self.step()?.frames == 0 {
                return Ok(i);
            }
        }
        Err(Error::Config(format!(
            "messages still flowing after {max_rounds} rounds"
        )))
    }

    pub fn retire_all(&self) {
        for n in &self.nodes {
            for w in 0..self.cfg.workers_per_node {
                n.retire_worker(w);
            }
        }
    }

    /// Current value of every key at its owner, including unsealed updates.
    pub fn final_values(&self) -> Vec<Vec<f32>> {
        (0..self.cfg.num_keys)
            .map(|k| {
                let key = Key(k);
                self.nodes.iter().find_map(|n| n.owned_value(key)).unwrap_or_default()
            })
            .collect()
    }

    pub fn metrics(&self) -> Vec<MetricsSnapshot> {
        self.nodes.iter().map(|n| n.metrics().snapshot()).collect()
    }

    pub fn total_metrics(&self) -> MetricsSnapshot {
        let mut t = MetricsSnapshot::default();
        for m in self.metrics() {
            t.accumulate(&m);
        }
        t
    }

    /// Replicas and main copies per node.
    pub fn census(&self) -> Vec<(usize, usize)> {
        self.nodes.iter().map(|n| n.store().census()).collect()
    }
}

impl RemoteAccess for SimCluster {
    /// Walks the routing state of the simulated nodes. Frames are encoded to
    /// account exact bytes: one read to `target`, one per forwarding hop,
    /// and one reply per owner.
    fn read(&self, from: &Node, target: NodeId, keys: &[Key]) -> Result<RemoteRead> {
        let origin = from.id();
        let mut values = Vec::with_capacity(keys.len());
        // (forwarder, next) -> keys, owner -> entries
        let mut forwards: BTreeMap<(NodeId, NodeId, u8), Vec<Key>> = BTreeMap::new();
        let mut replies: BTreeMap<NodeId, Vec<ReadEntry>> = BTreeMap::new();
        let mut max_hops = 1u8;
        for &key in keys {
            let mut at = target;
            let mut hops = 1u8;
            let value = loop {
                match self.nodes[at.index()].serve_read(key) {
                    Ok(v) => break v,
                    Err(next) => {
                        hops += 1;
                        if hops > MAX_HOPS {
                            return Err(Error::RoutingLoop {
                                key,
                                hops: MAX_HOPS as u32,
                            });
                        }
                        forwards.entry((at, next, hops)).or_default().push(key);
                        at = next;
                    }
                }
            };
            from.metrics().record_hops(hops);
            max_hops = max_hops.max(hops);
            from.learn_owner(key, at);
            replies.entry(at).or_default().push(ReadEntry {
                key,
                owner: at,
                hops,
                value: value.clone(),
            });
            values.push(value);
        }

        let mut total = 0usize;
        let mut size = |f: Frame| {
            let n = wire::encode(&f).len();
            total += n;
            n
        };
        let first = size(Frame::Read(ReadRequest {
            id: 0,
            origin,
            hops: 1,
            keys: keys.to_vec(),
        }));
        from.count_read_bytes(first);
        for ((at, _, hops), ks) in forwards {
            let n = size(Frame::Read(ReadRequest {
                id: 0,
                origin,
                hops,
                keys: ks,
            }));
            self.nodes[at.index()].count_read_bytes(n);
        }
        for (owner, entries) in replies {
            let n = size(Frame::ReadReply(ReadReply { id: 0, entries }));
            self.nodes[owner.index()].count_read_bytes(n);
        }
        let sim = &self.cfg.sim;
        let cost_us = (max_hops as f64 + 1.0) * sim.remote_hop_us + total as f64 / sim.bandwidth_bytes_per_us;
        Ok(RemoteRead { values, cost_us })
    }
}

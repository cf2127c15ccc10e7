//! One node of the parameter manager and its round engine.
//!
//! A communication round has three phases per node. The cluster driver
//! (simulated or real) calls them in this order every step:
//!
//! 1. [`Node::handle_requests`]: apply the previous round's requests, seal
//!    merged updates into new versions, then let the owner decide per key
//!    whether to relocate, create or destroy replicas. Produces responses.
//! 2. [`Node::handle_responses`]: install relocations and replicas, apply
//!    refreshes and location updates.
//! 3. [`Node::build_requests`]: forward misrouted items, update rate
//!    estimates, collect intent transitions, ship replica and remote updates.
//!
//! Each node sends at most one request and one response per peer per round.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ClusterConfig, PolicyMode, ValueInit};
use crate::decision;
use crate::error::{Error, Result};
use crate::metrics::NodeMetrics;
use crate::model::{add_into, Clock, Key, NodeId, RoundIndex, Version};
use crate::registry::IntentRegistry;
use crate::routing::{LocationSource, RouteStep, Router};
use crate::store::{AnnounceOutcome, Holder, OwnedRecord, ParameterStore, Slot};
use crate::timing::{act_bound, QuantileCache, RateEstimator, RateObservation};
use crate::wire::{
    Announcement, Envelope, EnvelopeKind, LocationUpdate, RefreshBody, RelocationGrant, RemotePush, ReplicaRefresh,
    ReplicaUpdate, Sections, FLAG_IDLE,
};

/// Rounds between sending an intent end and applying the owner's answer:
/// one per transmission of a message that takes at most three hops.
pub const END_ANSWER_ROUNDS: RoundIndex = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    RelocateStart,
    RelocateDone,
    ReplicaCreate,
    ReplicaDestroy,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::RelocateStart => "relocate_start",
            EventKind::RelocateDone => "relocate_done",
            EventKind::ReplicaCreate => "replica_create",
            EventKind::ReplicaDestroy => "replica_destroy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            EventKind::RelocateStart,
            EventKind::RelocateDone,
            EventKind::ReplicaCreate,
            EventKind::ReplicaDestroy,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

/// Placement change. `node` is the relocation target, the new owner, or the
/// replica holder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    pub round: RoundIndex,
    pub kind: EventKind,
    pub key: Key,
    pub node: NodeId,
}

/// Keyed item on its way to the key's owner.
#[derive(Clone, Debug)]
enum Routed {
    Start(Announcement),
    End(Announcement),
    Update(ReplicaUpdate),
    Push(RemotePush),
}

impl Routed {
    fn key(&self) -> Key {
        match self {
            Routed::Start(a) | Routed::End(a) => a.key,
            Routed::Update(u) => u.key,
            Routed::Push(p) => p.key,
        }
    }

    fn hops_mut(&mut self) -> &mut u8 {
        match self {
            Routed::Start(a) | Routed::End(a) => &mut a.hops,
            Routed::Update(u) => &mut u.hops,
            Routed::Push(p) => &mut p.hops,
        }
    }

    fn add_to(self, s: &mut Sections) {
        match self {
            Routed::Start(a) => s.intent_starts.push(a),
            Routed::End(a) => s.intent_ends.push(a),
            Routed::Update(u) => s.replica_updates.push(u),
            Routed::Push(p) => s.remote_pushes.push(p),
        }
    }
}

/// Per-worker rate estimate at one round, kept when tracing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateSample {
    pub round: RoundIndex,
    pub worker: u16,
    pub clock: Clock,
    pub lambda_hat: f64,
}

struct SyncState {
    round: RoundIndex,
    estimators: Vec<RateEstimator>,
    quantiles: QuantileCache,
    announce_seq: u64,
    replica_seq: u64,
    forward: Vec<Routed>,
    outbox: BTreeMap<NodeId, Sections>,
    /// Owned keys whose intent membership changed or that just arrived.
    dirty: BTreeSet<Key>,
    /// Keys whose intent end this node announced, with the round it was
    /// sent. The owner's answer arrives within [`END_ANSWER_ROUNDS`].
    ends_outstanding: HashMap<Key, RoundIndex>,
    events: Vec<Event>,
    rate_trace: Vec<RateSample>,
}

pub struct Node {
    id: NodeId,
    cfg: Arc<ClusterConfig>,
    store: ParameterStore,
    registry: IntentRegistry,
    router: RwLock<Router>,
    metrics: NodeMetrics,
    push_queue: Mutex<BTreeMap<Key, Vec<f32>>>,
    retired: Vec<AtomicBool>,
    sync: Mutex<SyncState>,
    now_bits: AtomicU64,
}

/// Deterministic initial value of a key.
pub fn initial_value(init: ValueInit, key: Key, len: usize) -> Vec<f32> {
    match init {
        ValueInit::Zero => vec![0.0; len],
        ValueInit::Hashed(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.0.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            (0..len).map(|_| rng.random_range(-0.1f32..0.1)).collect()
        }
    }
}

impl Node {
    pub fn new(id: NodeId, cfg: Arc<ClusterConfig>) -> Self {
        let store = ParameterStore::new(cfg.num_keys, cfg.value_len);
        let full = cfg.policy == PolicyMode::FullReplication;
        let others: Vec<NodeId> = (0..cfg.num_nodes).map(NodeId).filter(|&n| n != id).collect();
        for k in 0..cfg.num_keys {
            let key = Key(k);
            let home = crate::routing::home_node(key, cfg.num_nodes);
            if home == id {
                let mut rec = OwnedRecord::new(initial_value(cfg.value_init, key, cfg.value_len));
                if full {
                    rec.holders = others
                        .iter()
                        .map(|&node| Holder {
                            node,
                            version: Version(0),
                            acked_seq: 0,
                            ack_pending: false,
                        })
                        .collect();
                }
                store.install_owned(key, rec);
            } else if full {
                let value = initial_value(cfg.value_init, key, cfg.value_len);
                let r = ReplicaRefresh {
                    key,
                    version: Version(0),
                    acked_seq: 0,
                    body: RefreshBody::Full(value),
                };
                let rec = store.new_replica(home, &r, 0.0);
                *store.slot(key) = Slot::Replica(Box::new(rec));
            }
        }
        let workers = cfg.workers_per_node;
        Node {
            id,
            store,
            registry: IntentRegistry::new(id, workers, cfg.num_keys, cfg.policy.uses_intent()),
            router: RwLock::new(Router::new(id, cfg.num_nodes, cfg.location_caches)),
            metrics: NodeMetrics::default(),
            push_queue: Mutex::new(BTreeMap::new()),
            retired: (0..workers).map(|_| AtomicBool::new(false)).collect(),
            sync: Mutex::new(SyncState {
                round: 0,
                estimators: (0..workers).map(|_| RateEstimator::new(&cfg.timing, 0)).collect(),
                quantiles: QuantileCache::new(),
                announce_seq: 0,
                replica_seq: 0,
                forward: Vec::new(),
                outbox: BTreeMap::new(),
                dirty: BTreeSet::new(),
                ends_outstanding: HashMap::new(),
                events: Vec::new(),
                rate_trace: Vec::new(),
            }),
            now_bits: AtomicU64::new(0f64.to_bits()),
            cfg,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &IntentRegistry {
        &self.registry
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn metrics(&self) -> &NodeMetrics {
        &self.metrics
    }

    /// Time used to stamp replica refreshes, in microseconds.
    pub fn now(&self) -> f64 {
        f64::from_bits(self.now_bits.load(Ordering::Acquire))
    }

    pub fn set_now(&self, t: f64) {
        self.now_bits.store(t.to_bits(), Ordering::Release);
    }

    pub fn round(&self) -> RoundIndex {
        self.sync.lock().round
    }

    /// Marks a worker as finished: its pending intents are dropped and its
    /// acted-on intents expire at the next round.
    pub fn retire_worker(&self, worker: u16) {
        self.retired[worker as usize].store(true, Ordering::Release);
    }

    pub fn all_retired(&self) -> bool {
        self.retired.iter().all(|r| r.load(Ordering::Acquire))
    }

    fn check_key(&self, key: Key) -> Result<()> {
        if key.0 >= self.cfg.num_keys {
            return Err(Error::KeyOutOfRange {
                key,
                num_keys: self.cfg.num_keys,
            });
        }
        Ok(())
    }

    // ------------------------------------------------------------ workers

    /// Serves a pull from local state if possible.
    pub fn pull_local(&self, key: Key, now: f64) -> Result<Option<Vec<f32>>> {
        self.check_key(key)?;
        self.metrics.add(&self.metrics.pulls, 1);
        match self.store.pull(key, now) {
            Some((v, served, staleness)) => {
                match served {
                    crate::store::Served::OwnedLocal => self.metrics.add(&self.metrics.pulls_owned, 1),
                    _ => {
                        self.metrics.add(&self.metrics.pulls_replica, 1);
                        if let Some(s) = staleness {
                            self.metrics.staleness_us.lock().record(s);
                        }
                    }
                }
                Ok(Some(v))
            }
            None => {
                self.metrics.add(&self.metrics.pulls_remote, 1);
                Ok(None)
            }
        }
    }

    /// Applies an update locally or queues it for the owner. Never blocks on
    /// the network.
    pub fn push(&self, key: Key, delta: &[f32]) -> Result<()> {
        self.check_key(key)?;
        if delta.len() != self.cfg.value_len {
            return Err(Error::ValueLength {
                key,
                expected: self.cfg.value_len,
                got: delta.len(),
            });
        }
        self.metrics.add(&self.metrics.pushes, 1);
        if self.store.push(key, delta) == crate::store::PushOutcome::NotLocal {
            self.metrics.add(&self.metrics.pushes_queued, 1);
            let mut q = self.push_queue.lock();
            match q.get_mut(&key) {
                Some(acc) => add_into(acc, delta),
                None => {
                    q.insert(key, delta.to_vec());
                }
            }
        }
        Ok(())
    }

    /// Main copy value for a remote reader, or where to look next.
    pub fn serve_read(&self, key: Key) -> std::result::Result<Vec<f32>, NodeId> {
        if let Some((v, _)) = self.store.read_owned(key) {
            return Ok(v);
        }
        match self.router.read().forward_if_not_owner(key, false) {
            RouteStep::Forward(n) => Err(n),
            RouteStep::Local => unreachable!("not owner"),
        }
    }

    /// First node to ask about `key`.
    pub fn route_target(&self, key: Key) -> NodeId {
        self.router.read().route_target(key)
    }

    /// Records the owner learned from a remote read.
    pub fn learn_owner(&self, key: Key, owner: NodeId) {
        self.router
            .write()
            .record_location_update(key, owner, LocationSource::RemoteAccessResponse);
    }

    pub fn count_read_bytes(&self, bytes: usize) {
        self.metrics.add(&self.metrics.read_bytes_sent, bytes as u64);
    }

    pub fn count_sent(&self, kind: EnvelopeKind, bytes: usize) {
        self.metrics.add(&self.metrics.bytes_sent, bytes as u64);
        self.metrics.add(&self.metrics.frames_sent, 1);
        match kind {
            EnvelopeKind::Request => self.metrics.add(&self.metrics.requests_sent, 1),
            EnvelopeKind::Response => self.metrics.add(&self.metrics.responses_sent, 1),
        }
    }

    // ------------------------------------------------------------ rounds

    /// Starts a new round; events of this round carry its index.
    pub fn begin_round(&self, round: RoundIndex) {
        self.sync.lock().round = round;
    }

    /// Phase 1: applies requests, seals versions, decides placement.
    pub fn handle_requests(&self, envs: Vec<Envelope>) -> Vec<Envelope> {
        let mut sync = self.sync.lock();
        self.handle(&mut sync, envs);
        for key in self.store.take_touched() {
            let mut slot = self.store.slot(key);
            if let Slot::Owned(rec) = &mut *slot {
                if rec.seal() {
                    for (n, r) in rec.refreshes(key) {
                        sync.outbox.entry(n).or_default().refresh_deltas.push(r);
                    }
                }
            }
        }
        for key in std::mem::take(&mut sync.dirty) {
            self.reconcile_key(&mut sync, key);
        }
        self.drain_outbox(&mut sync, EnvelopeKind::Response)
    }

    /// Phase 2: applies responses.
    pub fn handle_responses(&self, envs: Vec<Envelope>) {
        let mut sync = self.sync.lock();
        self.handle(&mut sync, envs);
    }

    /// Phase 3: assembles this round's requests.
    pub fn build_requests(&self) -> Vec<Envelope> {
        let mut sync = self.sync.lock();
        let sync = &mut *sync;

        let forward = std::mem::take(&mut sync.forward);
        let mut local = Vec::new();
        {
            let router = self.router.read();
            for mut item in forward {
                let key = item.key();
                match router.forward_if_not_owner(key, self.store.owns(key)) {
                    RouteStep::Local => local.push(item),
                    RouteStep::Forward(n) => {
                        let hops = item.hops_mut();
                        *hops = hops.saturating_add(1);
                        self.metrics.add(&self.metrics.forwards, 1);
                        item.add_to(sync.outbox.entry(n).or_default());
                    }
                }
            }
        }
        for item in local {
            self.apply_routed(sync, item);
        }

        if self.cfg.policy.uses_intent() {
            self.collect_intents(sync);
        }

        let queued = std::mem::take(&mut *self.push_queue.lock());
        for (key, delta) in queued {
            if self.store.merge(key, &delta) {
                continue;
            }
            if self.store.push(key, &delta) == crate::store::PushOutcome::Replica {
                continue;
            }
            let to = self.route_target(key);
            sync.outbox
                .entry(to)
                .or_default()
                .remote_pushes
                .push(RemotePush { key, hops: 1, delta });
        }

        for key in self.store.take_replica_dirty() {
            sync.replica_seq += 1;
            let seq = sync.replica_seq;
            if let Some((owner, version, delta)) = self.store.ship_replica_updates(key, seq) {
                sync.outbox
                    .entry(owner)
                    .or_default()
                    .replica_updates
                    .push(ReplicaUpdate {
                        key,
                        origin: self.id,
                        seq,
                        version,
                        hops: 1,
                        delta,
                    });
            }
        }

        self.drain_outbox(sync, EnvelopeKind::Request)
    }

    fn collect_intents(&self, sync: &mut SyncState) {
        let workers = self.retired.len();
        let retired: Vec<bool> = self.retired.iter().map(|r| r.load(Ordering::Acquire)).collect();
        let clocks: Vec<Clock> = (0..workers)
            .map(|w| {
                if retired[w] {
                    Clock::MAX
                } else {
                    self.registry.clock(w as u16)
                }
            })
            .collect();
        let mut obs: Vec<Option<RateObservation>> = vec![None; workers];
        for w in 0..workers {
            if retired[w] {
                continue;
            }
            let o = sync.estimators[w].observe(clocks[w]);
            if self.cfg.record_rates {
                sync.rate_trace.push(RateSample {
                    round: sync.round,
                    worker: w as u16,
                    clock: clocks[w],
                    lambda_hat: o.lambda_hat,
                });
            }
            obs[w] = Some(o);
        }
        let round = sync.round;
        sync.ends_outstanding
            .retain(|_, sent| round - *sent <= END_ANSWER_ROUNDS);
        let immediate = self.cfg.policy == PolicyMode::AdaPMImmediateAction;
        let p = self.cfg.timing.quantile;
        let quantiles = &mut sync.quantiles;
        let mut decider = |w: usize, c: Clock| -> Option<Clock> {
            match obs[w] {
                Some(o) if !immediate => act_bound(c, o.decision_rate, p, quantiles),
                _ => None,
            }
        };
        let signals = self.registry.collect_round_signals(&clocks, &mut decider);
        self.metrics
            .add(&self.metrics.late_intents, signals.dropped_late as u64);

        for (keys, start) in [(signals.ends, false), (signals.starts, true)] {
            for key in keys {
                sync.announce_seq += 1;
                let a = Announcement {
                    key,
                    origin: self.id,
                    seq: sync.announce_seq,
                    hops: 1,
                };
                if start {
                    sync.ends_outstanding.remove(&key);
                }
                if self.store.owns(key) {
                    self.announce_local(sync, a, start);
                    continue;
                }
                if !start {
                    sync.ends_outstanding.insert(key, sync.round);
                }
                let to = self.route_target(key);
                let s = sync.outbox.entry(to).or_default();
                if start {
                    self.metrics.add(&self.metrics.intent_starts_sent, 1);
                    s.intent_starts.push(a);
                } else {
                    self.metrics.add(&self.metrics.intent_ends_sent, 1);
                    s.intent_ends.push(a);
                }
            }
        }
    }

    fn drain_outbox(&self, sync: &mut SyncState, kind: EnvelopeKind) -> Vec<Envelope> {
        let idle = kind == EnvelopeKind::Request && self.is_idle_locked(sync);
        let outbox = std::mem::take(&mut sync.outbox);
        outbox
            .into_iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(to, sections)| {
                debug_assert_ne!(to, self.id);
                let mut e = Envelope::new(self.id, to, sync.round, kind);
                if idle {
                    e.flags |= FLAG_IDLE;
                }
                e.sections = sections;
                e
            })
            .collect()
    }

    fn handle(&self, sync: &mut SyncState, envs: Vec<Envelope>) {
        // Location knowledge first, so that forwarding decisions below use it.
        for env in &envs {
            for loc in &env.sections.location_updates {
                self.apply_location(sync, env.from, *loc);
            }
        }
        for env in envs {
            let from = env.from;
            let s = env.sections;
            for g in s.relocation_grants {
                self.install_grant(sync, from, g);
            }
            for p in s.replica_payloads {
                self.install_replica(from, p);
            }
            for r in s.refresh_deltas {
                self.refresh_replica(from, r);
            }
            for key in s.replica_destroys {
                self.destroy_replica(sync, key);
            }
            for a in s.intent_ends {
                self.route_in(sync, Routed::End(a));
            }
            for u in s.replica_updates {
                self.route_in(sync, Routed::Update(u));
            }
            for p in s.remote_pushes {
                self.route_in(sync, Routed::Push(p));
            }
            for a in s.intent_starts {
                self.route_in(sync, Routed::Start(a));
            }
        }
    }

    fn route_in(&self, sync: &mut SyncState, item: Routed) {
        if self.store.owns(item.key()) {
            self.apply_routed(sync, item);
        } else {
            sync.forward.push(item);
        }
    }

    fn apply_routed(&self, sync: &mut SyncState, item: Routed) {
        let hops = match &item {
            Routed::Start(a) | Routed::End(a) => a.hops,
            Routed::Update(u) => u.hops,
            Routed::Push(p) => p.hops,
        };
        self.metrics.record_hops(hops);
        match item {
            Routed::Start(a) => self.announce_local(sync, a, true),
            Routed::End(a) => self.announce_local(sync, a, false),
            Routed::Update(u) => {
                let mut slot = self.store.slot(u.key);
                if let Slot::Owned(rec) = &mut *slot {
                    if rec.merge_from_holder(u.origin, u.seq, &u.delta) {
                        drop(slot);
                        self.store.mark_touched(u.key);
                    }
                }
            }
            Routed::Push(p) => {
                self.store.merge(p.key, &p.delta);
            }
        }
    }

    fn announce_local(&self, sync: &mut SyncState, a: Announcement, start: bool) {
        let mut slot = self.store.slot(a.key);
        let Slot::Owned(rec) = &mut *slot else {
            return;
        };
        match rec.announce(a.origin, a.seq, start) {
            AnnounceOutcome::Changed => {
                sync.dirty.insert(a.key);
            }
            AnnounceOutcome::Unchanged => {}
            AnnounceOutcome::Stale => self.metrics.add(&self.metrics.stale_announcements, 1),
            AnnounceOutcome::Duplicate => self.metrics.add(&self.metrics.protocol_warnings, 1),
        }
    }

    fn apply_location(&self, sync: &mut SyncState, from: NodeId, loc: LocationUpdate) {
        let mut router = self.router.write();
        if router.is_home(loc.key) {
            router.update_directory(loc.key, loc.owner, loc.epoch);
            if from != self.id {
                // confirm so the sender can drop its tombstone
                sync.outbox.entry(from).or_default().location_updates.push(loc);
            }
        } else {
            router.acknowledge(loc.key, loc.epoch);
            if !self.store.owns(loc.key) {
                router.record_location_update(loc.key, loc.owner, LocationSource::RelocationNotice);
            }
        }
    }

    fn install_grant(&self, sync: &mut SyncState, from: NodeId, g: RelocationGrant) {
        let key = g.key;
        let leftover = match std::mem::take(&mut *self.store.slot(key)) {
            Slot::Replica(r) => (r.has_pending).then_some(r.pending),
            Slot::Owned(_) => {
                self.metrics.add(&self.metrics.protocol_warnings, 1);
                None
            }
            Slot::Empty => None,
        };
        let mut rec = OwnedRecord::new(g.value);
        rec.version = g.version;
        rec.epoch = g.epoch;
        rec.intents = g.intents;
        rec.acquired_round = sync.round;
        if let Some(p) = leftover {
            rec.merge(&p);
        }
        self.store.install_owned(key, rec);
        let mut router = self.router.write();
        router.relocated_here(key, g.epoch);
        if router.is_home(key) {
            // the previous owner keeps a tombstone until the home confirms
            sync.outbox
                .entry(from)
                .or_default()
                .location_updates
                .push(LocationUpdate {
                    key,
                    owner: self.id,
                    epoch: g.epoch,
                });
        }
        drop(router);
        self.metrics.add(&self.metrics.relocations_in, 1);
        sync.ends_outstanding.remove(&key);
        sync.dirty.insert(key);
        self.event(sync, EventKind::RelocateDone, key, self.id);
    }

    fn install_replica(&self, from: NodeId, p: ReplicaRefresh) {
        let key = p.key;
        let now = self.now();
        {
            let mut slot = self.store.slot(key);
            match &mut *slot {
                Slot::Empty => {
                    let rec = self.store.new_replica(from, &p, now);
                    *slot = Slot::Replica(Box::new(rec));
                }
                Slot::Replica(r) => {
                    r.owner = from;
                    r.apply(&p, now);
                }
                Slot::Owned(_) => {
                    self.metrics.add(&self.metrics.protocol_warnings, 1);
                    return;
                }
            }
        }
        self.router
            .write()
            .record_location_update(key, from, LocationSource::SyncResponse);
    }

    fn refresh_replica(&self, from: NodeId, r: ReplicaRefresh) {
        let now = self.now();
        let mut slot = self.store.slot(r.key);
        if let Slot::Replica(rec) = &mut *slot {
            rec.owner = from;
            if !rec.apply(&r, now) {
                self.metrics.add(&self.metrics.protocol_warnings, 1);
            }
        }
    }

    fn destroy_replica(&self, sync: &mut SyncState, key: Key) {
        sync.ends_outstanding.remove(&key);
        if let Some(pending) = self.store.destroy_replica(key) {
            if !pending.is_empty() {
                let mut q = self.push_queue.lock();
                match q.get_mut(&key) {
                    Some(acc) => add_into(acc, &pending),
                    None => {
                        q.insert(key, pending);
                    }
                }
            }
        }
    }

    fn reconcile_key(&self, sync: &mut SyncState, key: Key) {
        let mut slot = self.store.slot(key);
        let Slot::Owned(rec) = &mut *slot else {
            return;
        };
        let d = decision::reconcile(self.cfg.policy, self.id, &rec.active_nodes(), &rec.holder_nodes());
        if d.is_none() {
            return;
        }
        if rec.seal() {
            for (n, r) in rec.refreshes(key) {
                sync.outbox.entry(n).or_default().refresh_deltas.push(r);
            }
        }
        for n in &d.destroy {
            rec.remove_holder(*n);
            sync.outbox.entry(*n).or_default().replica_destroys.push(key);
            self.metrics.add(&self.metrics.replica_destructions, 1);
        }
        for n in &d.create {
            rec.add_holder(*n, 0);
            sync.outbox
                .entry(*n)
                .or_default()
                .replica_payloads
                .push(ReplicaRefresh {
                    key,
                    version: rec.version,
                    acked_seq: 0,
                    body: RefreshBody::Full(rec.value.clone()),
                });
            self.metrics.add(&self.metrics.replica_creations, 1);
        }
        let acked = d
            .relocate
            .and_then(|to| rec.holders.iter().find(|h| h.node == to))
            .map_or(0, |h| h.acked_seq);
        drop(slot);
        for n in d.destroy {
            self.event(sync, EventKind::ReplicaDestroy, key, n);
        }
        for n in d.create {
            self.event(sync, EventKind::ReplicaCreate, key, n);
        }
        if let Some(to) = d.relocate {
            let mut rec = self.store.take_owned(key).expect("owned");
            rec.seal();
            let epoch = rec.epoch + 1;
            let grant = RelocationGrant {
                key,
                version: rec.version,
                epoch,
                acked_seq: acked,
                value: rec.value,
                intents: rec.intents,
            };
            sync.outbox.entry(to).or_default().relocation_grants.push(grant);
            let mut router = self.router.write();
            router.relocated_away(key, to, epoch);
            let home = router.home(key);
            if home != self.id && home != to {
                sync.outbox
                    .entry(home)
                    .or_default()
                    .location_updates
                    .push(LocationUpdate { key, owner: to, epoch });
            }
            drop(router);
            self.metrics.add(&self.metrics.relocations_out, 1);
            self.event(sync, EventKind::RelocateStart, key, to);
        }
    }

    fn event(&self, sync: &mut SyncState, kind: EventKind, key: Key, node: NodeId) {
        if self.cfg.record_events {
            sync.events.push(Event {
                round: sync.round,
                kind,
                key,
                node,
            });
        }
    }

    // ------------------------------------------------------------ inspection

    fn is_idle_locked(&self, sync: &SyncState) -> bool {
        self.all_retired()
            && (self.registry.is_idle() || !self.cfg.policy.uses_intent())
            && self.push_queue.lock().is_empty()
            && sync.forward.is_empty()
            && sync.outbox.is_empty()
            && sync.dirty.is_empty()
    }

    /// Workers are done and nothing is queued locally.
    pub fn is_idle(&self) -> bool {
        let sync = self.sync.lock();
        self.is_idle_locked(&sync)
    }

    pub fn take_events(&self) -> Vec<Event> {
        std::mem::take(&mut self.sync.lock().events)
    }

    pub fn take_rate_trace(&self) -> Vec<RateSample> {
        std::mem::take(&mut self.sync.lock().rate_trace)
    }

    /// Replicas held without active intent and without an unanswered end.
    pub fn replica_violations(&self) -> Vec<Key> {
        if !self.cfg.policy.uses_intent() {
            return Vec::new();
        }
        let sync = self.sync.lock();
        let active: HashSet<Key> = self.registry.active_keys().into_iter().collect();
        (0..self.cfg.num_keys)
            .map(Key)
            .filter(|&k| {
                self.store.has_replica(k)
                    && !active.contains(&k)
                    && !sync
                        .ends_outstanding
                        .get(&k)
                        .is_some_and(|sent| sync.round - sent <= END_ANSWER_ROUNDS)
            })
            .collect()
    }

    /// Replica holders recorded at this node's main copies.
    pub fn holders_of(&self, key: Key) -> Option<Vec<NodeId>> {
        match &*self.store.slot(key) {
            Slot::Owned(rec) => Some(rec.holder_nodes()),
            _ => None,
        }
    }

    pub fn tombstones(&self) -> usize {
        self.router.read().tombstone_count()
    }

    /// Current value of an owned key including unsealed updates.
    pub fn owned_value(&self, key: Key) -> Option<Vec<f32>> {
        match &*self.store.slot(key) {
            Slot::Owned(rec) => Some(rec.current()),
            _ => None,
        }
    }
}

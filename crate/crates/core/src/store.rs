//! Node-local main copies and replicas.
//!
//! Each key has one slot guarded by its own lock, so worker reads and writes
//! on different keys never contend, and the sync driver's merges and
//! refreshes serialize with workers only per key.
//!
//! A main copy keeps the value at its current version separate from updates
//! merged since the last seal; sealing folds them in with one version step.
//! A replica keeps the owner's value at its synchronized version (`base`),
//! its own shipped but unacknowledged updates (`inflight`) and unshipped
//! updates (`pending`). Its readable value is always the sum of the three.

use std::collections::VecDeque;

use parking_lot::Mutex;

use crate::model::{add_into, Key, NodeId, Version};
use crate::wire::{IntentEntry, RefreshBody, ReplicaRefresh};

/// How a pull was served.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Served {
    OwnedLocal,
    Replica,
    RemoteSync,
}

/// Owner-side view of one replica holder.
#[derive(Clone, Debug, PartialEq)]
pub struct Holder {
    pub node: NodeId,
    /// Version the holder has been (or is being) refreshed to.
    pub version: Version,
    /// Highest update sequence from the holder merged here.
    pub acked_seq: u64,
    /// Acked sequence advanced since the last refresh.
    pub ack_pending: bool,
}

#[derive(Clone, Debug)]
pub struct OwnedRecord {
    pub value: Vec<f32>,
    /// Updates merged since the last seal.
    pub acc: Vec<f32>,
    pub touched: bool,
    pub version: Version,
    /// Number of relocations this key has gone through.
    pub epoch: u64,
    /// Latest announcement per node; active entries in activation order.
    pub intents: Vec<IntentEntry>,
    pub holders: Vec<Holder>,
    /// `(version, summed delta)` for versions newer than the oldest holder.
    pub log: VecDeque<(Version, Vec<f32>)>,
    /// Round in which the main copy arrived here.
    pub acquired_round: u64,
}

/// Result of applying an intent announcement to a main copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnounceOutcome {
    Changed,
    Unchanged,
    /// Older than an announcement already applied.
    Stale,
    /// Same sequence number seen twice.
    Duplicate,
}

impl OwnedRecord {
    pub fn new(value: Vec<f32>) -> Self {
        let len = value.len();
        OwnedRecord {
            value,
            acc: vec![0.0; len],
            touched: false,
            version: Version(0),
            epoch: 0,
            intents: Vec::new(),
            holders: Vec::new(),
            log: VecDeque::new(),
            acquired_round: 0,
        }
    }

    /// Value including updates not yet sealed.
    pub fn current(&self) -> Vec<f32> {
        let mut v = self.value.clone();
        add_into(&mut v, &self.acc);
        v
    }

    pub fn merge(&mut self, delta: &[f32]) -> bool {
        add_into(&mut self.acc, delta);
        let first = !self.touched;
        self.touched = true;
        first
    }

    pub fn active_nodes(&self) -> Vec<NodeId> {
        self.intents.iter().filter(|e| e.active).map(|e| e.node).collect()
    }

    pub fn holder_nodes(&self) -> Vec<NodeId> {
        self.holders.iter().map(|h| h.node).collect()
    }

    /// Latest announcement from each node wins.
    pub fn announce(&mut self, node: NodeId, seq: u64, start: bool) -> AnnounceOutcome {
        let pos = self.intents.iter().position(|e| e.node == node);
        if let Some(i) = pos {
            let e = self.intents[i];
            if seq == e.seq {
                return AnnounceOutcome::Duplicate;
            }
            if seq < e.seq {
                return AnnounceOutcome::Stale;
            }
            self.intents.remove(i);
            let entry = IntentEntry {
                node,
                seq,
                active: start,
            };
            self.insert_entry(entry);
            if e.active == start {
                AnnounceOutcome::Unchanged
            } else {
                AnnounceOutcome::Changed
            }
        } else {
            self.insert_entry(IntentEntry {
                node,
                seq,
                active: start,
            });
            if start {
                AnnounceOutcome::Changed
            } else {
                AnnounceOutcome::Unchanged
            }
        }
    }

    fn insert_entry(&mut self, entry: IntentEntry) {
        if entry.active {
            // after the last active entry keeps activation order
            let at = self.intents.iter().rposition(|e| e.active).map_or(0, |i| i + 1);
            self.intents.insert(at, entry);
        } else {
            self.intents.push(entry);
        }
    }

    /// Folds unsealed updates into the value with one version step.
    pub fn seal(&mut self) -> bool {
        if !self.touched {
            return false;
        }
        self.touched = false;
        add_into(&mut self.value, &self.acc);
        self.version = self.version.next();
        let delta = std::mem::replace(&mut self.acc, vec![0.0; self.value.len()]);
        if !self.holders.is_empty() {
            self.log.push_back((self.version, delta));
        }
        true
    }

    /// Refresh for a holder at `from`: the deltas it misses, or the full
    /// value when the log no longer reaches back that far.
    pub fn refresh_body(&self, from: Version) -> RefreshBody {
        if from >= self.version {
            return RefreshBody::Deltas(Vec::new());
        }
        match self.log.front() {
            Some((first, _)) if first.0 <= from.0 + 1 => RefreshBody::Deltas(
                self.log
                    .iter()
                    .filter(|(v, _)| *v > from)
                    .map(|(_, d)| d.clone())
                    .collect(),
            ),
            _ => RefreshBody::Full(self.value.clone()),
        }
    }

    /// Refreshes for every holder that is behind or awaits an ack, then
    /// prunes the log. Holders are considered synchronized once sent.
    pub fn refreshes(&mut self, key: Key) -> Vec<(NodeId, ReplicaRefresh)> {
        let mut out = Vec::new();
        for i in 0..self.holders.len() {
            let h = &self.holders[i];
            if h.version >= self.version && !h.ack_pending {
                continue;
            }
            let body = self.refresh_body(h.version);
            out.push((
                h.node,
                ReplicaRefresh {
                    key,
                    version: self.version,
                    acked_seq: h.acked_seq,
                    body,
                },
            ));
            let h = &mut self.holders[i];
            h.version = self.version;
            h.ack_pending = false;
        }
        self.prune_log();
        out
    }

    pub fn prune_log(&mut self) {
        match self.holders.iter().map(|h| h.version).min() {
            None => self.log.clear(),
            Some(min) => {
                while self.log.front().is_some_and(|(v, _)| *v <= min) {
                    self.log.pop_front();
                }
            }
        }
    }

    /// Merges a holder's shipped updates and records the acknowledgment.
    pub fn merge_from_holder(&mut self, node: NodeId, seq: u64, delta: &[f32]) -> bool {
        let first = self.merge(delta);
        if let Some(h) = self.holders.iter_mut().find(|h| h.node == node) {
            if seq > h.acked_seq {
                h.acked_seq = seq;
                h.ack_pending = true;
            }
        }
        first
    }

    /// Starts tracking a new holder at the current version.
    pub fn add_holder(&mut self, node: NodeId, acked_seq: u64) {
        self.holders.retain(|h| h.node != node);
        self.holders.push(Holder {
            node,
            version: self.version,
            acked_seq,
            ack_pending: false,
        });
    }

    pub fn remove_holder(&mut self, node: NodeId) -> Option<Holder> {
        let i = self.holders.iter().position(|h| h.node == node)?;
        let h = self.holders.remove(i);
        self.prune_log();
        Some(h)
    }
}

#[derive(Clone, Debug)]
pub struct ReplicaRecord {
    pub owner: NodeId,
    pub value: Vec<f32>,
    pub base: Vec<f32>,
    pub version: Version,
    pub inflight: Vec<(u64, Vec<f32>)>,
    pub pending: Vec<f32>,
    pub has_pending: bool,
    pub created_at: f64,
    pub last_refresh: f64,
}

impl ReplicaRecord {
    fn recompute(&mut self) {
        self.value.copy_from_slice(&self.base);
        for (_, d) in &self.inflight {
            add_into(&mut self.value, d);
        }
        add_into(&mut self.value, &self.pending);
    }

    /// Applies a refresh. Returns false if it is older than the local state.
    pub fn apply(&mut self, r: &ReplicaRefresh, now: f64) -> bool {
        match &r.body {
            RefreshBody::Full(v) => {
                if r.version < self.version {
                    return false;
                }
                self.base.copy_from_slice(v);
            }
            RefreshBody::Deltas(ds) => {
                if r.version.0 != self.version.0 + ds.len() as u64 {
                    return false;
                }
                for d in ds {
                    add_into(&mut self.base, d);
                }
            }
        }
        self.version = r.version;
        self.last_refresh = now;
        self.inflight.retain(|(s, _)| *s > r.acked_seq);
        self.recompute();
        true
    }
}

/// What the store did with a worker's push.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PushOutcome {
    Owned,
    Replica,
    NotLocal,
}

#[derive(Debug, Default)]
pub enum Slot {
    #[default]
    Empty,
    Owned(Box<OwnedRecord>),
    Replica(Box<ReplicaRecord>),
}

pub struct ParameterStore {
    value_len: usize,
    slots: Vec<Mutex<Slot>>,
    /// Owned keys with unsealed updates.
    touched: Mutex<Vec<Key>>,
    /// Replica keys with unshipped updates.
    replica_dirty: Mutex<Vec<Key>>,
}

impl ParameterStore {
    pub fn new(num_keys: u64, value_len: usize) -> Self {
        ParameterStore {
            value_len,
            slots: (0..num_keys).map(|_| Mutex::new(Slot::Empty)).collect(),
            touched: Mutex::new(Vec::new()),
            replica_dirty: Mutex::new(Vec::new()),
        }
    }

    pub fn value_len(&self) -> usize {
        self.value_len
    }

    pub fn num_keys(&self) -> u64 {
        self.slots.len() as u64
    }

    pub fn slot(&self, key: Key) -> parking_lot::MutexGuard<'_, Slot> {
        self.slots[key.index()].lock()
    }

    pub fn owns(&self, key: Key) -> bool {
        matches!(*self.slot(key), Slot::Owned(_))
    }

    pub fn has_replica(&self, key: Key) -> bool {
        matches!(*self.slot(key), Slot::Replica(_))
    }

    /// Local read. `None` when the key must be read remotely. Replica reads
    /// also report the time since the last refresh.
    pub fn pull(&self, key: Key, now: f64) -> Option<(Vec<f32>, Served, Option<f64>)> {
        match &*self.slot(key) {
            Slot::Owned(r) => Some((r.current(), Served::OwnedLocal, None)),
            Slot::Replica(r) => Some((r.value.clone(), Served::Replica, Some((now - r.last_refresh).max(0.0)))),
            Slot::Empty => None,
        }
    }

    /// Local write; the caller queues `NotLocal` updates for the owner.
    pub fn push(&self, key: Key, delta: &[f32]) -> PushOutcome {
        let mut slot = self.slot(key);
        match &mut *slot {
            Slot::Owned(r) => {
                if r.merge(delta) {
                    self.touched.lock().push(key);
                }
                PushOutcome::Owned
            }
            Slot::Replica(r) => {
                add_into(&mut r.value, delta);
                add_into(&mut r.pending, delta);
                if !r.has_pending {
                    r.has_pending = true;
                    self.replica_dirty.lock().push(key);
                }
                PushOutcome::Replica
            }
            Slot::Empty => PushOutcome::NotLocal,
        }
    }

    /// Value at the current version, as served to remote readers.
    pub fn read_owned(&self, key: Key) -> Option<(Vec<f32>, Version)> {
        match &*self.slot(key) {
            Slot::Owned(r) => Some((r.value.clone(), r.version)),
            _ => None,
        }
    }

    /// Merges an update arriving from another node. Returns false if this
    /// node does not own the key.
    pub fn merge(&self, key: Key, delta: &[f32]) -> bool {
        let mut slot = self.slot(key);
        match &mut *slot {
            Slot::Owned(r) => {
                if r.merge(delta) {
                    self.touched.lock().push(key);
                }
                true
            }
            _ => false,
        }
    }

    /// Drains the set of keys with unsealed updates, sorted.
    pub fn take_touched(&self) -> Vec<Key> {
        let mut keys = std::mem::take(&mut *self.touched.lock());
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    pub fn take_replica_dirty(&self) -> Vec<Key> {
        let mut keys = std::mem::take(&mut *self.replica_dirty.lock());
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    pub fn mark_touched(&self, key: Key) {
        self.touched.lock().push(key);
    }

    pub fn install_owned(&self, key: Key, rec: OwnedRecord) {
        let touched = rec.touched;
        *self.slot(key) = Slot::Owned(Box::new(rec));
        if touched {
            self.touched.lock().push(key);
        }
    }

    /// Removes the main copy (for relocation).
    pub fn take_owned(&self, key: Key) -> Option<Box<OwnedRecord>> {
        let mut slot = self.slot(key);
        match std::mem::take(&mut *slot) {
            Slot::Owned(r) => Some(r),
            other => {
                *slot = other;
                None
            }
        }
    }

    pub fn new_replica(&self, owner: NodeId, r: &ReplicaRefresh, now: f64) -> ReplicaRecord {
        let zero = vec![0.0; self.value_len];
        let mut rec = ReplicaRecord {
            owner,
            value: zero.clone(),
            base: zero.clone(),
            version: Version(0),
            inflight: Vec::new(),
            pending: zero,
            has_pending: false,
            created_at: now,
            last_refresh: now,
        };
        rec.apply(r, now);
        rec
    }

    /// Removes a replica, returning its unshipped updates.
    pub fn destroy_replica(&self, key: Key) -> Option<Vec<f32>> {
        let mut slot = self.slot(key);
        match std::mem::take(&mut *slot) {
            Slot::Replica(r) => Some(if r.has_pending { r.pending } else { Vec::new() }),
            other => {
                *slot = other;
                None
            }
        }
    }

    /// Moves a replica's unshipped updates to in-flight under `seq`.
    pub fn ship_replica_updates(&self, key: Key, seq: u64) -> Option<(NodeId, Version, Vec<f32>)> {
        let mut slot = self.slot(key);
        match &mut *slot {
            Slot::Replica(r) if r.has_pending => {
                let delta = std::mem::replace(&mut r.pending, vec![0.0; self.value_len]);
                r.has_pending = false;
                r.inflight.push((seq, delta.clone()));
                Some((r.owner, r.version, delta))
            }
            _ => None,
        }
    }

    /// Number of owned keys and replicas, by scanning.
    pub fn census(&self) -> (usize, usize) {
        let mut owned = 0;
        let mut replicas = 0;
        for s in &self.slots {
            match &*s.lock() {
                Slot::Owned(_) => owned += 1,
                Slot::Replica(_) => replicas += 1,
                Slot::Empty => {}
            }
        }
        (owned, replicas)
    }
}

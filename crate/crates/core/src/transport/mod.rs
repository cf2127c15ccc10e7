//! Frame delivery between nodes.
//!
//! A transport moves encoded frames (length prefix included) between the
//! nodes of one cluster. Two implementations exist: an in-process
//! [`loopback`] hub used by the simulator and by tests, and TCP
//! [`socket`]s for multi-process deployments. Both feed the same
//! [`EnvelopeCounters`], which count grouped request and response frames
//! per round and ordered node pair.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::Mutex;

use crate::error::Result;
use crate::model::{NodeId, RoundIndex};
use crate::wire::{TAG_REQUEST, TAG_RESPONSE};

pub mod loopback;
pub mod socket;

pub use loopback::{LoopbackHub, LoopbackTransport};
pub use socket::{parse_manifest, Manifest, SocketTransport};

pub trait Transport: Send + Sync {
    fn node(&self) -> NodeId;

    fn num_nodes(&self) -> u32;

    /// Queues an encoded frame for `to`.
    fn send(&self, to: NodeId, frame: Vec<u8>) -> Result<()>;

    /// Next frame addressed to this node with its sender, or `None` on
    /// timeout.
    fn recv_timeout(&self, timeout: Duration) -> Result<Option<(NodeId, Vec<u8>)>>;

    fn counters(&self) -> &EnvelopeCounters;
}

/// Grouped-frame counts per `(round, from, to)`.
#[derive(Debug, Default)]
pub struct EnvelopeCounters {
    seen: Mutex<HashMap<(RoundIndex, u32, u32), [u32; 2]>>,
    /// Largest number of requests or responses seen for one pair and round.
    max_per_pair: AtomicU64,
    frames: AtomicU64,
    bytes: AtomicU64,
}

impl EnvelopeCounters {
    /// Inspects the header of an outgoing frame.
    pub fn observe(&self, frame: &[u8]) {
        self.frames.fetch_add(1, Ordering::Relaxed);
        self.bytes.fetch_add(frame.len() as u64, Ordering::Relaxed);
        if frame.len() < 21 {
            return;
        }
        let slot = match frame[4] {
            TAG_REQUEST => 0,
            TAG_RESPONSE => 1,
            _ => return,
        };
        let from = u32::from_le_bytes(frame[5..9].try_into().unwrap());
        let to = u32::from_le_bytes(frame[9..13].try_into().unwrap());
        let round = u64::from_le_bytes(frame[13..21].try_into().unwrap());
        let mut seen = self.seen.lock();
        let c = seen.entry((round, from, to)).or_default();
        c[slot] += 1;
        self.max_per_pair.fetch_max(c[slot] as u64, Ordering::Relaxed);
    }

    pub fn max_per_pair(&self) -> u64 {
        self.max_per_pair.load(Ordering::Relaxed)
    }

    /// `[requests, responses]` for one round and ordered pair.
    pub fn get(&self, round: RoundIndex, from: NodeId, to: NodeId) -> [u32; 2] {
        self.seen
            .lock()
            .get(&(round, from.0, to.0))
            .copied()
            .unwrap_or_default()
    }

    pub fn frames(&self) -> u64 {
        self.frames.load(Ordering::Relaxed)
    }

    pub fn bytes(&self) -> u64 {
        self.bytes.load(Ordering::Relaxed)
    }

    /// Drops per-round detail before `round` to bound memory.
    pub fn forget_before(&self, round: RoundIndex) {
        self.seen.lock().retain(|(r, _, _), _| *r >= round);
    }
}

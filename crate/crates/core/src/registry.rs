//! Node-local intent storage and aggregation.
//!
//! Intents stay on the node that signaled them. Once per round the sync
//! driver asks the registry which keys became due (some local intent is acted
//! on and the node has not yet announced it) and which keys expired (every
//! acted-on intent of the key is past its end clock). Only these per-key
//! transitions cross the network, never per-worker detail.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::model::{Clock, Intent, Key, NodeId};

#[derive(Debug)]
struct PendingIntent {
    c_end: Clock,
    keys: Arc<[Key]>,
}

#[derive(Debug, Default)]
struct KeyIntents {
    /// Start announced and no end announced since.
    remote_active: bool,
    /// Acted-on intents: per worker, the latest end clock.
    live: Vec<(u16, Clock)>,
}

#[derive(Debug, Default)]
struct RegistryInner {
    /// Not yet acted on, per worker, ordered by start clock then arrival.
    pending: Vec<BTreeMap<(Clock, u64), PendingIntent>>,
    next_seq: u64,
    keys: HashMap<Key, KeyIntents>,
    /// Per worker: end clock -> keys whose acted-on intent ends there.
    expiry: Vec<BTreeMap<Clock, Vec<Key>>>,
    stored: usize,
}

/// Per-key transitions emitted in one round. Each key appears at most once
/// in each list.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct RoundSignals {
    pub starts: Vec<Key>,
    pub ends: Vec<Key>,
    /// Intents whose window had already passed when they became due.
    pub dropped_late: usize,
}

impl RoundSignals {
    pub fn is_empty(&self) -> bool {
        self.starts.is_empty() && self.ends.is_empty()
    }
}

/// Supplies, per worker and round, the start-clock bound below which
/// intents are acted on (`None`: act on all).
pub trait ActDecider {
    fn bound(&mut self, worker: usize, clock: Clock) -> Option<Clock>;
}

impl<F: FnMut(usize, Clock) -> Option<Clock>> ActDecider for F {
    fn bound(&mut self, worker: usize, clock: Clock) -> Option<Clock> {
        self(worker, clock)
    }
}

pub struct IntentRegistry {
    node: NodeId,
    num_keys: u64,
    enabled: bool,
    clocks: Vec<AtomicU64>,
    inner: Mutex<RegistryInner>,
}

impl IntentRegistry {
    pub fn new(node: NodeId, workers: u16, num_keys: u64, enabled: bool) -> Self {
        let workers = workers as usize;
        IntentRegistry {
            node,
            num_keys,
            enabled,
            clocks: (0..workers).map(|_| AtomicU64::new(0)).collect(),
            inner: Mutex::new(RegistryInner {
                pending: (0..workers).map(|_| BTreeMap::new()).collect(),
                expiry: (0..workers).map(|_| BTreeMap::new()).collect(),
                ..RegistryInner::default()
            }),
        }
    }

    pub fn num_workers(&self) -> usize {
        self.clocks.len()
    }

    /// Records an intent. No network traffic and no waiting on remote state.
    pub fn signal_intent(&self, intent: &Intent) -> Result<()> {
        intent.validate()?;
        if intent.worker.node != self.node {
            return Err(Error::InvalidArgument(format!(
                "intent of worker on node {} signaled at node {}",
                intent.worker.node, self.node
            )));
        }
        let w = intent.worker.local as usize;
        if w >= self.clocks.len() {
            return Err(Error::InvalidArgument(format!("unknown worker {w}")));
        }
        if let Some(&k) = intent.keys.iter().find(|k| k.0 >= self.num_keys) {
            return Err(Error::KeyOutOfRange {
                key: k,
                num_keys: self.num_keys,
            });
        }
        if !self.enabled || intent.keys.is_empty() {
            return Ok(());
        }
        let mut inner = self.inner.lock();
        let seq = inner.next_seq;
        inner.next_seq += 1;
        inner.stored += 1;
        inner.pending[w].insert(
            (intent.c_start, seq),
            PendingIntent {
                c_end: intent.c_end,
                keys: intent.keys.clone().into(),
            },
        );
        Ok(())
    }

    /// Raises the worker's clock by one. Expiry is handled lazily at the next
    /// round.
    pub fn advance_clock(&self, worker: u16) -> Clock {
        self.clocks[worker as usize].fetch_add(1, Ordering::AcqRel) + 1
    }

    pub fn clock(&self, worker: u16) -> Clock {
        self.clocks[worker as usize].load(Ordering::Acquire)
    }

    pub fn clocks(&self) -> Vec<Clock> {
        self.clocks.iter().map(|c| c.load(Ordering::Acquire)).collect()
    }

    /// Whether this node currently announces active intent for `key`.
    pub fn remote_active(&self, key: Key) -> bool {
        self.inner.lock().keys.get(&key).is_some_and(|k| k.remote_active)
    }

    pub fn active_keys(&self) -> Vec<Key> {
        let inner = self.inner.lock();
        let mut keys: Vec<Key> = inner
            .keys
            .iter()
            .filter(|(_, s)| s.remote_active)
            .map(|(k, _)| *k)
            .collect();
        keys.sort_unstable();
        keys
    }

    /// Number of intents not yet acted on.
    pub fn pending_intents(&self) -> usize {
        self.inner.lock().pending.iter().map(|p| p.len()).sum()
    }

    pub fn is_idle(&self) -> bool {
        let inner = self.inner.lock();
        inner.keys.is_empty() && inner.pending.iter().all(|p| p.is_empty())
    }

    /// Collects this round's per-key start and end announcements.
    ///
    /// `clocks` is the snapshot taken at round start; the same snapshot feeds
    /// the rate estimators behind `decider`.
    pub fn collect_round_signals(&self, clocks: &[Clock], decider: &mut dyn ActDecider) -> RoundSignals {
        let mut out = RoundSignals::default();
        let mut inner = self.inner.lock();
        let inner = &mut *inner;

        for (w, &clock) in clocks.iter().enumerate() {
            if inner.pending[w].is_empty() {
                continue;
            }
            let bound = decider.bound(w, clock);
            let due: Vec<(Clock, u64)> = match bound {
                Some(b) => inner.pending[w].range(..(b, 0)).map(|(k, _)| *k).collect(),
                None => inner.pending[w].keys().copied().collect(),
            };
            for slot in due {
                let intent = inner.pending[w].remove(&slot).expect("present");
                if intent.c_end <= clock {
                    out.dropped_late += 1;
                    continue;
                }
                for &key in intent.keys.iter() {
                    let state = inner.keys.entry(key).or_default();
                    match state.live.iter_mut().find(|(lw, _)| *lw as usize == w) {
                        Some((_, end)) => *end = (*end).max(intent.c_end),
                        None => state.live.push((w as u16, intent.c_end)),
                    }
                    if !state.remote_active {
                        state.remote_active = true;
                        out.starts.push(key);
                    }
                    inner.expiry[w].entry(intent.c_end).or_default().push(key);
                }
            }
        }

        for (w, &clock) in clocks.iter().enumerate() {
            let expired: Vec<Clock> = inner.expiry[w].range(..=clock).map(|(c, _)| *c).collect();
            for c in expired {
                let keys = inner.expiry[w].remove(&c).expect("present");
                for key in keys {
                    let Some(state) = inner.keys.get_mut(&key) else {
                        continue;
                    };
                    state.live.retain(|&(lw, end)| end > clocks[lw as usize]);
                    if state.live.is_empty() {
                        if state.remote_active {
                            out.ends.push(key);
                        }
                        inner.keys.remove(&key);
                    }
                }
            }
        }

        inner.stored = inner.pending.iter().map(|p| p.len()).sum();
        out.starts.sort_unstable();
        out.ends.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WorkerId;
    use proptest::prelude::*;

    fn reg(workers: u16) -> IntentRegistry {
        IntentRegistry::new(NodeId(0), workers, 1_000, true)
    }

    fn intent(w: u16, keys: &[u64], s: Clock, e: Clock) -> Intent {
        Intent::new(
            WorkerId::new(NodeId(0), w),
            keys.iter().map(|&k| Key(k)).collect(),
            s,
            e,
        )
        .unwrap()
    }

    fn act_all() -> impl FnMut(usize, Clock) -> Option<Clock> {
        |_, _| None
    }

    #[test]
    fn advance_clock_increments() {
        let r = reg(1);
        assert_eq!(r.clock(0), 0);
        assert_eq!(r.advance_clock(0), 1);
        assert_eq!(r.clock(0), 1);
    }

    #[test]
    fn signal_is_local_and_validated() {
        let r = reg(1);
        r.signal_intent(&intent(0, &[1, 2, 3], 2, 3)).unwrap();
        assert_eq!(r.pending_intents(), 1);
        let bad = Intent {
            c_start: 5,
            c_end: 5,
            ..intent(0, &[1], 1, 2)
        };
        assert!(r.signal_intent(&bad).is_err());
        let out_of_range = intent(0, &[5_000], 1, 2);
        assert!(matches!(
            r.signal_intent(&out_of_range),
            Err(Error::KeyOutOfRange { .. })
        ));
    }

    #[test]
    fn overlapping_intents_recorded_independently() {
        let r = reg(1);
        r.signal_intent(&intent(0, &[7], 2, 6)).unwrap();
        r.signal_intent(&intent(0, &[7], 4, 9)).unwrap();
        assert_eq!(r.pending_intents(), 2);
        let s = r.collect_round_signals(&[0], &mut act_all());
        assert_eq!(s.starts, vec![Key(7)]);
        // the later end keeps the key active past the first window
        let s = r.collect_round_signals(&[6], &mut act_all());
        assert!(s.ends.is_empty());
        let s = r.collect_round_signals(&[9], &mut act_all());
        assert_eq!(s.ends, vec![Key(7)]);
    }

    #[test]
    fn many_workers_aggregate_to_one_start() {
        let r = reg(32);
        for w in 0..32 {
            let i = Intent::new(WorkerId::new(NodeId(0), w), vec![Key(42)], 3, 4).unwrap();
            r.signal_intent(&i).unwrap();
        }
        let clocks = vec![0; 32];
        let s = r.collect_round_signals(&clocks, &mut act_all());
        assert_eq!(s.starts, vec![Key(42)]);
        assert!(s.ends.is_empty());
    }

    #[test]
    fn expiry_yields_single_end() {
        let r = reg(2);
        r.signal_intent(&intent(0, &[5], 0, 2)).unwrap();
        r.signal_intent(&intent(1, &[5], 0, 3)).unwrap();
        let s = r.collect_round_signals(&[0, 0], &mut act_all());
        assert_eq!(s.starts, vec![Key(5)]);
        // worker 1 still inside its window
        let s = r.collect_round_signals(&[2, 2], &mut act_all());
        assert!(s.ends.is_empty());
        let s = r.collect_round_signals(&[2, 3], &mut act_all());
        assert_eq!(s.ends, vec![Key(5)]);
        assert!(!r.remote_active(Key(5)));
        assert!(r.is_idle());
    }

    #[test]
    fn far_future_intents_wait() {
        let r = reg(1);
        r.signal_intent(&intent(0, &[9], 100, 101)).unwrap();
        let mut decider = |_w: usize, c: Clock| Some(c + 10);
        let s = r.collect_round_signals(&[0], &mut decider);
        assert!(s.is_empty());
        assert_eq!(r.pending_intents(), 1);
        let s = r.collect_round_signals(&[91], &mut decider);
        assert_eq!(s.starts, vec![Key(9)]);
    }

    #[test]
    fn future_intent_does_not_hold_key_active() {
        let r = reg(1);
        r.signal_intent(&intent(0, &[1], 0, 1)).unwrap();
        r.signal_intent(&intent(0, &[1], 50, 51)).unwrap();
        let mut decider = |_w: usize, c: Clock| Some(c + 5);
        let s = r.collect_round_signals(&[0], &mut decider);
        assert_eq!(s.starts, vec![Key(1)]);
        let s = r.collect_round_signals(&[1], &mut decider);
        assert_eq!(s.ends, vec![Key(1)]);
        let s = r.collect_round_signals(&[46], &mut decider);
        assert_eq!(s.starts, vec![Key(1)]);
    }

    #[test]
    fn late_intent_is_dropped() {
        let r = reg(1);
        r.signal_intent(&intent(0, &[3], 1, 2)).unwrap();
        let s = r.collect_round_signals(&[5], &mut act_all());
        assert!(s.is_empty());
        assert_eq!(s.dropped_late, 1);
    }

    #[test]
    fn disabled_registry_stores_nothing() {
        let r = IntentRegistry::new(NodeId(0), 1, 10, false);
        r.signal_intent(&intent(0, &[3], 1, 2)).unwrap();
        assert!(r.is_idle());
    }

    #[test]
    fn concurrent_advance_loses_nothing() {
        let r = std::sync::Arc::new(reg(1));
        let reader = {
            let r = r.clone();
            std::thread::spawn(move || {
                let mut last = 0;
                for _ in 0..10_000 {
                    let c = r.clock(0);
                    assert!(c >= last);
                    last = c;
                }
            })
        };
        for _ in 0..10_000 {
            r.advance_clock(0);
        }
        reader.join().unwrap();
        assert_eq!(r.clock(0), 10_000);
    }

    proptest! {
        #[test]
        fn announcements_alternate_and_drain(
            intents in prop::collection::vec((0u16..3, 0u64..4, 0u64..30, 1u64..8), 1..40),
            steps in prop::collection::vec(0u64..4, 1..60),
            horizon in 0u64..12,
        ) {
            let r = reg(3);
            for &(w, k, s, len) in &intents {
                r.signal_intent(&intent(w, &[k], s, s + len)).unwrap();
            }
            let mut clocks = [0u64; 3];
            let mut last: HashMap<Key, bool> = HashMap::new();
            let mut decider = |_w: usize, c: Clock| Some(c + horizon);
            let check = |s: &RoundSignals, last: &mut HashMap<Key, bool>| {
                for k in &s.ends {
                    assert_eq!(last.insert(*k, false), Some(true), "end without start");
                }
                for k in &s.starts {
                    assert_ne!(last.insert(*k, true), Some(true), "double start");
                }
            };
            for (i, &step) in steps.iter().enumerate() {
                clocks[i % 3] += step;
                let s = r.collect_round_signals(&clocks, &mut decider);
                check(&s, &mut last);
            }
            // run every worker past every window
            let end = [100u64; 3];
            let s = r.collect_round_signals(&end, &mut decider);
            check(&s, &mut last);
            let s = r.collect_round_signals(&end, &mut decider);
            check(&s, &mut last);
            prop_assert!(r.is_idle());
            prop_assert!(last.values().all(|active| !active));
        }
    }
}

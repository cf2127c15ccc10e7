//! Randomized end-to-end exercise of the simulator.
//!
//! Every worker runs a loader-style loop: it plans future batches, signals
//! intent for them with a random offset and window, and when its clock
//! reaches a planned batch it pulls and pushes the planned keys plus a few
//! unplanned ones. Deltas are small integers so that sums are exact in
//! binary32 regardless of merge order; each worker also keeps its own
//! integer tally, which serves as the reference for the final values.

use std::collections::VecDeque;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::Client;
use crate::cluster::{InvariantReport, SimCluster};
use crate::config::{ClusterConfig, Execution, PolicyMode};
use crate::error::Result;
use crate::metrics::MetricsSnapshot;
use crate::model::{Clock, Key, UpdateDelta};
use crate::node::Node;

#[derive(Clone, Debug)]
pub struct StressConfig {
    pub nodes: u32,
    pub workers_per_node: u16,
    pub num_keys: u64,
    pub value_len: usize,
    /// Total pushes across all workers.
    pub pushes: u64,
    pub seed: u64,
    pub policy: PolicyMode,
    pub location_caches: bool,
    pub check_invariants: bool,
    pub execution: Execution,
    /// Keys per planned batch.
    pub batch_keys: usize,
    /// Size of the hot key range shared by all workers.
    pub hot_keys: u64,
    /// Largest distance between signaling and using a batch.
    pub max_offset: u64,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            nodes: 4,
            workers_per_node: 4,
            num_keys: 10_000,
            value_len: 2,
            pushes: 100_000,
            seed: 1,
            policy: PolicyMode::AdaPM,
            location_caches: true,
            check_invariants: true,
            execution: Execution::Parallel,
            batch_keys: 6,
            hot_keys: 48,
            max_offset: 12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StressReport {
    pub final_values: Vec<Vec<f32>>,
    /// Per-key integer sums of every pushed delta.
    pub expected: Vec<Vec<i64>>,
    pub metrics: MetricsSnapshot,
    pub invariants: InvariantReport,
    /// Most request or response frames seen for one ordered pair in a round.
    pub max_envelopes_per_pair: u64,
    pub rounds: u64,
    pub pushes: u64,
}

impl StressReport {
    /// Keys whose final value differs from the reference.
    pub fn mismatches(&self) -> Vec<Key> {
        self.final_values
            .iter()
            .zip(&self.expected)
            .enumerate()
            .filter(|(_, (got, want))| {
                got.len() != want.len() || got.iter().zip(want.iter()).any(|(g, w)| *g as f64 != *w as f64)
            })
            .map(|(k, _)| Key(k as u64))
            .collect()
    }
}

struct WorkerState {
    rng: ChaCha8Rng,
    /// Planned batches: (clock at which to run, keys).
    plan: VecDeque<(Clock, Vec<Key>)>,
    quota: u64,
    retired: bool,
    tally: Vec<i64>,
}

fn worker_seed(seed: u64, node: u32, worker: u16) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ ((node as u64) << 32 | worker as u64)
}

pub fn run_stress(sc: &StressConfig) -> Result<StressReport> {
    let cfg = ClusterConfig {
        num_nodes: sc.nodes,
        workers_per_node: sc.workers_per_node,
        num_keys: sc.num_keys,
        value_len: sc.value_len,
        policy: sc.policy,
        location_caches: sc.location_caches,
        execution: sc.execution,
        check_invariants: sc.check_invariants,
        ..ClusterConfig::default()
    };
    let mut cluster = SimCluster::new(cfg)?;
    let total_workers = sc.nodes as u64 * sc.workers_per_node as u64;
    let states: Vec<Mutex<Vec<WorkerState>>> = (0..sc.nodes)
        .map(|n| {
            Mutex::new(
                (0..sc.workers_per_node)
                    .map(|w| {
                        let idx = n as u64 * sc.workers_per_node as u64 + w as u64;
                        WorkerState {
                            rng: ChaCha8Rng::seed_from_u64(worker_seed(sc.seed, n, w)),
                            plan: VecDeque::new(),
                            quota: sc.pushes / total_workers + u64::from(idx < sc.pushes % total_workers),
                            retired: false,
                            tally: vec![0; (sc.num_keys as usize) * sc.value_len],
                        }
                    })
                    .collect(),
            )
        })
        .collect();

    let mut guard = 0u64;
    loop {
        cluster.step()?;
        let done = {
            let c = &cluster;
            c.for_each_node(|node| {
                let mut ws = states[node.id().index()].lock();
                let mut all = true;
                for (w, st) in ws.iter_mut().enumerate() {
                    if !st.retired {
                        run_window(c, node, w as u16, st, sc)?;
                    }
                    all &= st.retired;
                }
                Ok(all)
            })
            .into_iter()
            .collect::<Result<Vec<bool>>>()?
        };
        if done.into_iter().all(|d| d) {
            break;
        }
        guard += 1;
        if guard > 10 * sc.pushes + 1_000 {
            return Err(crate::Error::Config("stress workers made no progress".into()));
        }
    }
    cluster.run_until_quiescent(10_000)?;

    let mut expected = vec![vec![0i64; sc.value_len]; sc.num_keys as usize];
    let mut pushes = 0;
    for node_states in &states {
        for st in node_states.lock().iter() {
            for (i, v) in st.tally.iter().enumerate() {
                expected[i / sc.value_len][i % sc.value_len] += v;
            }
        }
    }
    for m in cluster.metrics() {
        pushes += m.pushes;
    }
    Ok(StressReport {
        final_values: cluster.final_values(),
        expected,
        metrics: cluster.total_metrics(),
        invariants: cluster.invariants().clone(),
        max_envelopes_per_pair: cluster.counters().max_per_pair(),
        rounds: cluster.round(),
        pushes,
    })
}

fn pick_key(rng: &mut ChaCha8Rng, sc: &StressConfig) -> Key {
    if rng.random_bool(0.3) {
        Key(rng.random_range(0..sc.hot_keys.min(sc.num_keys)))
    } else {
        Key(rng.random_range(0..sc.num_keys))
    }
}

/// Runs one worker for one window: zero to three batches.
fn run_window(cluster: &SimCluster, node: &Node, w: u16, st: &mut WorkerState, sc: &StressConfig) -> Result<()> {
    let client = Client::new(node, cluster);
    let batches = st.rng.random_range(0..=3u32);
    for _ in 0..batches {
        let clock = client.clock(w);
        // plan ahead: one new batch per processed batch
        let offset = st.rng.random_range(0..=sc.max_offset);
        let keys: Vec<Key> = (0..sc.batch_keys).map(|_| pick_key(&mut st.rng, sc)).collect();
        let span = st.rng.random_range(1..=3u64);
        client.intent(w, &keys, clock + offset, clock + offset + span, None)?;
        st.plan.push_back((clock + offset, keys));

        let mut keys: Vec<Key> = Vec::new();
        st.plan.retain(|(at, ks)| {
            if *at <= clock {
                keys.extend_from_slice(ks);
                false
            } else {
                true
            }
        });
        keys.push(pick_key(&mut st.rng, sc));
        keys.sort_unstable();
        keys.dedup();

        client.pull_at(&keys, cluster.now_us())?;
        let mut deltas = Vec::with_capacity(keys.len());
        for &k in &keys {
            if st.quota == 0 {
                break;
            }
            st.quota -= 1;
            let comps: Vec<i64> = (0..sc.value_len).map(|_| st.rng.random_range(-3..=3)).collect();
            for (i, c) in comps.iter().enumerate() {
                st.tally[k.index() * sc.value_len + i] += c;
            }
            deltas.push(UpdateDelta::new(k, comps.into_iter().map(|c| c as f32).collect()));
        }
        client.push(w, &deltas)?;
        client.advance_clock(w);
        if st.quota == 0 {
            client.retire(w);
            st.retired = true;
            break;
        }
    }
    Ok(())
}

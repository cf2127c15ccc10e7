//! Benchmarks on the simulated cluster.
//!
//! Every worker follows the loader pattern: while it trains batch `i` its
//! loader has already signaled intent for the batches up to
//! `i + signal_offset_batches`, each as `Intent(P_j, j, j + 1)`. Workers
//! advance through simulated time: a batch costs its compute time plus the
//! latency of any synchronous remote reads, and a worker processes batches
//! for as long as its cursor lies inside the current round's window.

use intentps_core::client::Client;
use intentps_core::cluster::SimCluster;
use intentps_core::metrics::MetricsSnapshot;
use intentps_core::node::Node;
use intentps_core::{
    ClusterConfig, Error, Execution, Key, PolicyMode, Result, SimTiming, TimingConfig, UpdateDelta, ValueInit,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Mutex;

use crate::report::{MetricsReport, MetricsRow, RateRow};
use crate::workload::{access_counts, generate, update_pattern, WorkerPlan, WorkloadSpec};

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub spec: WorkloadSpec,
    pub mode: PolicyMode,
    pub nodes: u32,
    pub workers_per_node: u16,
    pub epochs: u64,
    pub timing: TimingConfig,
    pub sim: SimTiming,
    pub execution: Execution,
    pub location_caches: bool,
    pub memory_budget: Option<u64>,
    pub channels: u32,
    pub trace_keys: Vec<Key>,
    pub record_rates: bool,
    pub check_invariants: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            spec: WorkloadSpec::default(),
            mode: PolicyMode::AdaPM,
            nodes: 4,
            workers_per_node: 4,
            epochs: 1,
            timing: TimingConfig::default(),
            sim: SimTiming::default(),
            execution: Execution::Parallel,
            location_caches: true,
            memory_budget: None,
            channels: 4,
            trace_keys: Vec::new(),
            record_rates: false,
            check_invariants: false,
        }
    }
}

impl BenchConfig {
    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            num_nodes: self.nodes,
            workers_per_node: self.workers_per_node,
            num_keys: self.spec.num_keys,
            value_len: self.spec.value_len,
            policy: self.mode,
            timing: self.timing.clone(),
            location_caches: self.location_caches,
            value_init: ValueInit::Zero,
            execution: self.execution,
            sim: self.sim.clone(),
            record_events: false,
            record_rates: self.record_rates,
            check_invariants: self.check_invariants,
            memory_budget: self.memory_budget,
            channels: self.channels,
        }
    }
}

/// Runs `spec` under `mode` with default timing.
pub fn run_benchmark(
    spec: &WorkloadSpec,
    mode: PolicyMode,
    nodes: u32,
    workers_per_node: u16,
    epochs: u64,
) -> Result<MetricsReport> {
    run(&BenchConfig {
        spec: spec.clone(),
        mode,
        nodes,
        workers_per_node,
        epochs,
        ..BenchConfig::default()
    })
}

/// Results of one signal offset.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub offset: u64,
    pub adapm: MetricsReport,
    pub immediate: MetricsReport,
}

/// Runs AdaPM and its immediate-action variant at every offset.
pub fn sweep_signal_offset(base: &BenchConfig, offsets: &[u64]) -> Result<Vec<SweepPoint>> {
    offsets
        .iter()
        .map(|&offset| {
            let at = |mode| {
                let mut cfg = base.clone();
                cfg.spec.signal_offset_batches = offset;
                cfg.mode = mode;
                run(&cfg)
            };
            Ok(SweepPoint {
                offset,
                adapm: at(PolicyMode::AdaPM)?,
                immediate: at(PolicyMode::AdaPMImmediateAction)?,
            })
        })
        .collect()
}

struct WorkerSim {
    plan: usize,
    next: u64,
    signaled: u64,
    cursor_us: f64,
    rng: ChaCha8Rng,
    /// Cursor at the end of each finished epoch.
    epoch_end_us: Vec<f64>,
}

struct NodeProgress {
    last: MetricsSnapshot,
    epochs_recorded: u64,
    last_end_us: f64,
}

pub fn run(cfg: &BenchConfig) -> Result<MetricsReport> {
    if cfg.epochs == 0 {
        return Err(Error::Config("at least one epoch is required".into()));
    }
    let mut cluster = SimCluster::new(cfg.cluster_config())?;
    cluster.set_trace_keys(cfg.trace_keys.clone());
    let spec = &cfg.spec;
    let wpn = cfg.workers_per_node as usize;
    let plans = generate(spec, cfg.nodes as usize * wpn, cfg.epochs)?;
    let total = spec.batches_per_epoch * cfg.epochs;
    let loss = LossProbe::new(spec, &plans);

    let workers: Vec<Mutex<Vec<WorkerSim>>> = (0..cfg.nodes as usize)
        .map(|n| {
            Mutex::new(
                (0..wpn)
                    .map(|w| WorkerSim {
                        plan: n * wpn + w,
                        next: 0,
                        signaled: 0,
                        cursor_us: 0.0,
                        rng: ChaCha8Rng::seed_from_u64(spec.seed ^ ((n * wpn + w) as u64) << 40),
                        epoch_end_us: Vec::new(),
                    })
                    .collect(),
            )
        })
        .collect();
    let mut progress: Vec<NodeProgress> = (0..cfg.nodes)
        .map(|_| NodeProgress {
            last: MetricsSnapshot::default(),
            epochs_recorded: 0,
            last_end_us: 0.0,
        })
        .collect();
    let mut rows = Vec::new();
    let mut epoch_loss = Vec::new();
    let mut rate_trace = Vec::new();
    let name = cfg.mode.name();
    let offset = spec.signal_offset_batches;

    let max_rounds = 64 * total + 10_000;
    loop {
        let stats = cluster.step()?;
        if cfg.record_rates {
            collect_rates(&cluster, &mut rate_trace);
        }
        let window_end = stats.window_start_us + stats.duration_us;
        let c = &cluster;
        let done: Vec<bool> = c
            .for_each_node(|node| {
                let mut ws = workers[node.id().index()].lock().unwrap();
                for (w, st) in ws.iter_mut().enumerate() {
                    st.cursor_us = st.cursor_us.max(stats.window_start_us);
                    run_window(
                        c,
                        node,
                        w as u16,
                        st,
                        &plans[st.plan],
                        spec,
                        &cfg.sim,
                        window_end,
                        total,
                    )?;
                }
                Ok(ws.iter().all(|st| st.next == total))
            })
            .into_iter()
            .collect::<Result<_>>()?;

        // epochs finished by every worker of a node, except the last one,
        // which is recorded once the cluster is quiet
        for (n, p) in progress.iter_mut().enumerate() {
            let ws = workers[n].lock().unwrap();
            let finished = ws.iter().map(|st| st.epoch_end_us.len() as u64).min().unwrap_or(0);
            while p.epochs_recorded < finished.min(cfg.epochs - 1) {
                rows.push(epoch_row(&cluster, n, p, &ws, name, offset));
            }
        }
        let global = progress.iter().map(|p| p.epochs_recorded).min().unwrap_or(0);
        while (epoch_loss.len() as u64) < global {
            epoch_loss.push(loss.measure(&cluster.final_values()));
        }
        if done.iter().all(|&d| d) {
            break;
        }
        if stats.round > max_rounds {
            return Err(Error::Config(format!(
                "benchmark made no progress after {max_rounds} rounds"
            )));
        }
    }
    cluster.run_until_quiescent(10_000)?;
    if cfg.record_rates {
        collect_rates(&cluster, &mut rate_trace);
    }
    for (n, p) in progress.iter_mut().enumerate() {
        let ws = workers[n].lock().unwrap();
        rows.push(epoch_row(&cluster, n, p, &ws, name, offset));
    }
    let final_values = cluster.final_values();
    epoch_loss.push(loss.measure(&final_values));
    for row in &mut rows {
        row.loss = epoch_loss[row.epoch.parse::<usize>().unwrap()];
    }
    rows.sort_by_key(|r| (r.epoch.parse::<u64>().unwrap(), r.node.parse::<u32>().unwrap()));

    let totals = cluster.total_metrics();
    let mut summary =
        MetricsRow::from_counters(name, offset, "all".into(), "all".into(), &totals, &totals.staleness_us);
    let end_us = workers
        .iter()
        .flat_map(|ws| ws.lock().unwrap().iter().map(|st| st.cursor_us).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    summary.epoch_time_ms = end_us / 1e3 / cfg.epochs as f64;
    summary.rounds = cluster.round();
    summary.loss = *epoch_loss.last().unwrap();

    Ok(MetricsReport {
        workload: spec.clone(),
        mode: name.to_string(),
        nodes: cfg.nodes,
        workers_per_node: cfg.workers_per_node,
        epochs: cfg.epochs,
        rows,
        summary,
        epoch_loss,
        trace: cluster.trace().to_vec(),
        rate_trace,
        final_values,
    })
}

fn epoch_row(
    cluster: &SimCluster,
    n: usize,
    p: &mut NodeProgress,
    ws: &[WorkerSim],
    mode: &str,
    offset: u64,
) -> MetricsRow {
    let now = cluster.nodes()[n].metrics().snapshot();
    let d = now.since(&p.last);
    let staleness = now.staleness_us.since(&p.last.staleness_us);
    let e = p.epochs_recorded;
    let mut row = MetricsRow::from_counters(mode, offset, n.to_string(), e.to_string(), &d, &staleness);
    let end = ws.iter().map(|st| st.epoch_end_us[e as usize]).fold(0.0, f64::max);
    row.epoch_time_ms = (end - p.last_end_us) / 1e3;
    row.rounds = cluster.round();
    p.last = now;
    p.last_end_us = end;
    p.epochs_recorded += 1;
    row
}

fn collect_rates(cluster: &SimCluster, out: &mut Vec<RateRow>) {
    for node in cluster.nodes() {
        out.extend(node.take_rate_trace().into_iter().map(|s| RateRow {
            round: s.round,
            node: node.id().0,
            worker: s.worker,
            clock: s.clock,
            lambda_hat: s.lambda_hat,
        }));
    }
}

#[allow(clippy::too_many_arguments)]
fn run_window(
    cluster: &SimCluster,
    node: &Node,
    w: u16,
    st: &mut WorkerSim,
    plan: &WorkerPlan,
    spec: &WorkloadSpec,
    sim: &SimTiming,
    window_end: f64,
    total: u64,
) -> Result<()> {
    let client = Client::new(node, cluster);
    while st.cursor_us < window_end && st.next < total {
        let i = st.next;
        let horizon = (i + spec.signal_offset_batches).min(total - 1);
        while st.signaled <= horizon {
            let j = st.signaled;
            client.intent(w, &plan[j as usize], j, j + 1, None)?;
            st.signaled += 1;
        }
        let keys = &plan[i as usize];
        let pulled = client.pull_at(keys, st.cursor_us)?;
        let jitter = 1.0 + sim.compute_jitter * (2.0 * st.rng.random::<f64>() - 1.0);
        st.cursor_us += sim.batch_compute_us * jitter + pulled.remote_cost_us;
        let deltas: Vec<UpdateDelta> = keys
            .iter()
            .map(|&k| UpdateDelta::new(k, update_pattern(k, spec.value_len)))
            .collect();
        client.push(w, &deltas)?;
        client.advance_clock(w);
        st.next += 1;
        if st.next % spec.batches_per_epoch == 0 {
            st.epoch_end_us.push(st.cursor_us);
        }
        if st.next == total {
            client.retire(w);
        }
    }
    Ok(())
}

/// Squared distance to the fully trained values on a fixed sample of keys.
struct LossProbe {
    sample: Vec<(Key, Vec<f32>)>,
}

impl LossProbe {
    fn new(spec: &WorkloadSpec, plans: &[WorkerPlan]) -> Self {
        let counts = access_counts(plans, spec.num_keys);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x1055));
        let used: Vec<Key> = (0..spec.num_keys)
            .filter(|&k| counts[k as usize] > 0)
            .map(Key)
            .collect();
        let sample = (0..used.len().min(512))
            .map(|_| {
                let k = used[rng.random_range(0..used.len())];
                let target = update_pattern(k, spec.value_len)
                    .into_iter()
                    .map(|s| s * counts[k.index()] as f32)
                    .collect();
                (k, target)
            })
            .collect();
        LossProbe { sample }
    }

    fn measure(&self, values: &[Vec<f32>]) -> f64 {
        if self.sample.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .sample
            .iter()
            .map(|(k, t)| {
                let v = &values[k.index()];
                t.iter().zip(v).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / t.len() as f64
            })
            .sum();
        total / self.sample.len() as f64
    }
}

/// Expected final value of every key: access count times the update
/// pattern.
pub fn expected_values(spec: &WorkloadSpec, plans: &[WorkerPlan]) -> Vec<Vec<f32>> {
    access_counts(plans, spec.num_keys)
        .into_iter()
        .enumerate()
        .map(|(k, c)| {
            update_pattern(Key(k as u64), spec.value_len)
                .into_iter()
                .map(|s| s * c as f32)
                .collect()
        })
        .collect()
}

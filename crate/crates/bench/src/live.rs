//! Loader-pattern workers for threaded and multi-process runs.

use std::sync::atomic::{AtomicBool, Ordering};

use intentps_core::client::Client;
use intentps_core::realtime::NodeReport;
use intentps_core::{Key, Result, UpdateDelta};

use crate::report::{MetricsReport, MetricsRow};
use crate::run::BenchConfig;
use crate::workload::{update_pattern, WorkerPlan, WorkloadSpec};

/// Worker body for [`intentps_core::realtime::run_node`]. Worker `w` of
/// node `n` replays plan `n * workers_per_node + w`; it stops early, between
/// batches, once `stop` is set.
pub fn plan_worker<'a>(
    plans: &'a [WorkerPlan],
    spec: &'a WorkloadSpec,
    workers_per_node: u16,
    stop: &'a AtomicBool,
) -> impl Fn(&Client, u16) -> Result<()> + Sync + 'a {
    move |client: &Client, w: u16| {
        let plan = &plans[client.node().id().index() * workers_per_node as usize + w as usize];
        let total = plan.len() as u64;
        let mut signaled = 0u64;
        for i in 0..total {
            if stop.load(Ordering::Relaxed) {
                break;
            }
            let horizon = (i + spec.signal_offset_batches).min(total - 1);
            while signaled <= horizon {
                client.intent(w, &plan[signaled as usize], signaled, signaled + 1, None)?;
                signaled += 1;
            }
            let keys = &plan[i as usize];
            client.pull(w, keys)?;
            let deltas: Vec<UpdateDelta> = keys
                .iter()
                .map(|&k| UpdateDelta::new(k, update_pattern(k, spec.value_len)))
                .collect();
            client.push(w, &deltas)?;
            client.advance_clock(w);
        }
        Ok(())
    }
}

/// Keys owned by `report.node` whose value differs from `expected`.
pub fn conservation_errors(report: &NodeReport, expected: &[Vec<f32>]) -> Vec<Key> {
    report
        .owned
        .iter()
        .filter(|(k, v)| expected.get(k.index()) != Some(v))
        .map(|(k, _)| *k)
        .collect()
}

/// Metrics of one node process: a single epoch row and a summary row.
/// Loss is taken over the keys this node owns.
pub fn node_metrics(cfg: &BenchConfig, report: &NodeReport, expected: &[Vec<f32>]) -> MetricsReport {
    let name = cfg.mode.name();
    let offset = cfg.spec.signal_offset_batches;
    let m = &report.metrics;
    let loss: f64 = report
        .owned
        .iter()
        .map(|(k, v)| {
            v.iter()
                .zip(&expected[k.index()])
                .map(|(a, b)| f64::from(a - b).powi(2))
                .sum::<f64>()
        })
        .sum();
    let row = |node: String, epoch: String| {
        let mut r = MetricsRow::from_counters(name, offset, node, epoch, m, &m.staleness_us);
        r.epoch_time_ms = report.elapsed.as_secs_f64() * 1e3 / cfg.epochs as f64;
        r.rounds = report.rounds;
        r.loss = loss;
        r
    };
    MetricsReport {
        workload: cfg.spec.clone(),
        mode: name.to_string(),
        nodes: cfg.nodes,
        workers_per_node: cfg.workers_per_node,
        epochs: cfg.epochs,
        rows: vec![row(report.node.0.to_string(), "0".into())],
        summary: row("all".into(), "all".into()),
        epoch_loss: vec![loss],
        trace: Vec::new(),
        rate_trace: Vec::new(),
        final_values: Vec::new(),
    }
}

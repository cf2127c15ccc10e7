//! Metrics reports and their CSV and JSON forms.
//!
//! The CSV schema is one header line followed by one row per node and epoch
//! and a final summary row per run whose `node` and `epoch` columns read
//! `all`. Sweeps concatenate the rows of several runs; `mode` and
//! `signal_offset` tell them apart. JSON holds the same rows plus the run
//! configuration.

use intentps_core::cluster::TraceRow;
use intentps_core::metrics::{Histogram, MetricsSnapshot};
use intentps_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::workload::WorkloadSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mode: String,
    pub signal_offset: u64,
    pub node: String,
    pub epoch: String,
    /// Simulated wall time of the epoch.
    pub epoch_time_ms: f64,
    pub bytes_sent: u64,
    pub frames_sent: u64,
    pub pulls: u64,
    pub remote_pulls: u64,
    pub remote_share: f64,
    pub staleness_mean_ms: f64,
    pub staleness_p99_ms: f64,
    pub relocations: u64,
    pub replica_creations: u64,
    pub replica_destructions: u64,
    pub rounds: u64,
    pub loss: f64,
    pub protocol_warnings: u64,
}

impl MetricsRow {
    pub(crate) fn from_counters(
        mode: &str,
        offset: u64,
        node: String,
        epoch: String,
        m: &MetricsSnapshot,
        staleness: &Histogram,
    ) -> Self {
        MetricsRow {
            mode: mode.to_string(),
            signal_offset: offset,
            node,
            epoch,
            epoch_time_ms: 0.0,
            bytes_sent: m.total_bytes(),
            frames_sent: m.frames_sent,
            pulls: m.pulls,
            remote_pulls: m.pulls_remote,
            remote_share: m.remote_access_share(),
            staleness_mean_ms: staleness.mean() / 1e3,
            staleness_p99_ms: staleness.quantile(0.99) / 1e3,
            relocations: m.relocations_in,
            replica_creations: m.replica_creations,
            replica_destructions: m.replica_destructions,
            rounds: 0,
            loss: 0.0,
            protocol_warnings: m.protocol_warnings,
        }
    }
}

/// One rate estimate of one worker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub round: u64,
    pub node: u32,
    pub worker: u16,
    pub clock: u64,
    pub lambda_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub workload: WorkloadSpec,
    pub mode: String,
    pub nodes: u32,
    pub workers_per_node: u16,
    pub epochs: u64,
    pub rows: Vec<MetricsRow>,
    pub summary: MetricsRow,
    /// Loss after each epoch.
    pub epoch_loss: Vec<f64>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
    #[serde(skip)]
    pub rate_trace: Vec<RateRow>,
    #[serde(skip)]
    pub final_values: Vec<Vec<f32>>,
}

impl MetricsReport {
    pub fn total_bytes(&self) -> u64 {
        self.summary.bytes_sent
    }

    pub fn bytes_per_node(&self) -> f64 {
        self.summary.bytes_sent as f64 / self.nodes as f64
    }

    pub fn remote_access_share(&self) -> f64 {
        self.summary.remote_share
    }

    pub fn staleness_mean_ms(&self) -> f64 {
        self.summary.staleness_mean_ms
    }

    /// Mean epoch duration.
    pub fn epoch_time_ms(&self) -> f64 {
        self.summary.epoch_time_ms
    }

    pub fn relocation_count(&self) -> u64 {
        self.summary.relocations
    }

    pub fn replica_creation_count(&self) -> u64 {
        self.summary.replica_creations
    }

    pub fn rounds_executed(&self) -> u64 {
        self.summary.rounds
    }
}

/// All rows of `reports`, summaries last within each run.
pub fn metrics_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        for row in r.rows.iter().chain(std::iter::once(&r.summary)) {
            w.serialize(row).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// A single report as an object, several as an array.
pub fn metrics_json(reports: &[MetricsReport]) -> Result<String> {
    let out = if let [one] = reports {
        serde_json::to_string_pretty(one)
    } else {
        serde_json::to_string_pretty(reports)
    };
    out.map_err(|e| Error::Config(format!("json: {e}")))
}

/// `round,key,owner,holders` with holders separated by `;`.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("round,key,owner,holders\n");
    for r in rows {
        let holders: Vec<String> = r.holders.iter().map(|h| h.to_string()).collect();
        s.push_str(&format!("{},{},{},{}\n", r.round, r.key, r.owner, holders.join(";")));
    }
    s
}

pub fn rate_csv(rows: &[RateRow]) -> String {
    let mut s = String::from("round,node,worker,clock,lambda_hat\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.round, r.node, r.worker, r.clock, r.lambda_hat
        ));
    }
    s
}

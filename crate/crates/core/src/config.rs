use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Settings of the learned action timing.
#[derive(Clone, Debug, PartialEq)]
pub struct TimingConfig {
    /// Exponential smoothing factor for the clocks-per-round estimate.
    pub alpha: f64,
    /// Quantile used as soft upper bound on clocks during two rounds.
    pub quantile: f64,
    /// Initial clocks-per-round estimate.
    pub initial_rate: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            alpha: 0.1,
            quantile: 0.9999,
            initial_rate: 10.0,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "timing.alpha must be in (0,1], got {}",
                self.alpha
            )));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Config(format!(
                "timing.quantile must be in (0,1), got {}",
                self.quantile
            )));
        }
        if !(self.initial_rate > 0.0 && self.initial_rate.is_finite()) {
            return Err(Error::Config(format!(
                "timing.initial_rate must be positive, got {}",
                self.initial_rate
            )));
        }
        Ok(())
    }
}

/// Parameter management policy. All modes share store and protocol code and
/// differ only in the owner decision and the action timing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolicyMode {
    AdaPM,
    AdaPMNoRelocation,
    AdaPMNoReplication,
    AdaPMImmediateAction,
    StaticPartitioning,
    FullReplication,
}

impl PolicyMode {
    pub const ALL: [PolicyMode; 6] = [
        PolicyMode::AdaPM,
        PolicyMode::AdaPMNoRelocation,
        PolicyMode::AdaPMNoReplication,
        PolicyMode::AdaPMImmediateAction,
        PolicyMode::StaticPartitioning,
        PolicyMode::FullReplication,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyMode::AdaPM => "adapm",
            PolicyMode::AdaPMNoRelocation => "adapm-no-relocation",
            PolicyMode::AdaPMNoReplication => "adapm-no-replication",
            PolicyMode::AdaPMImmediateAction => "adapm-immediate",
            PolicyMode::StaticPartitioning => "static-partitioning",
            PolicyMode::FullReplication => "full-replication",
        }
    }

    /// Whether intent signals are acted upon at all.
    pub fn uses_intent(self) -> bool {
        !matches!(self, PolicyMode::StaticPartitioning | PolicyMode::FullReplication)
    }

    pub fn allows_relocation(self) -> bool {
        matches!(
            self,
            PolicyMode::AdaPM | PolicyMode::AdaPMNoReplication | PolicyMode::AdaPMImmediateAction
        )
    }

    pub fn allows_replication(self) -> bool {
        matches!(
            self,
            PolicyMode::AdaPM | PolicyMode::AdaPMNoRelocation | PolicyMode::AdaPMImmediateAction
        )
    }
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyMode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode '{s}'")))
    }
}

/// Initial parameter values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueInit {
    Zero,
    /// Small deterministic pseudo-random values derived from key and seed.
    Hashed(u64),
}

/// How the simulator runs per-node phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon across nodes. Falls back to sequential without the `parallel`
    /// feature.
    Parallel,
}

/// Cost model of the simulated cluster, in microseconds and bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTiming {
    /// Fixed cost of one communication round.
    pub round_overhead_us: f64,
    /// Per-node network bandwidth.
    pub bandwidth_bytes_per_us: f64,
    /// Lower bound on round duration (from a rounds-per-second limit).
    pub min_round_us: f64,
    /// Mean compute time of one batch.
    pub batch_compute_us: f64,
    /// Relative jitter of batch compute time, uniform in `[1-j, 1+j]`.
    pub compute_jitter: f64,
    /// Cost of one network hop of a synchronous remote read.
    pub remote_hop_us: f64,
}

impl Default for SimTiming {
    fn default() -> Self {
        SimTiming {
            round_overhead_us: 400.0,
            bandwidth_bytes_per_us: 1250.0,
            min_round_us: 0.0,
            batch_compute_us: 1000.0,
            compute_jitter: 0.25,
            remote_hop_us: 150.0,
        }
    }
}

impl SimTiming {
    pub fn with_rounds_per_sec(mut self, rounds_per_sec: Option<f64>) -> Self {
        self.min_round_us = match rounds_per_sec {
            Some(r) if r > 0.0 => 1e6 / r,
            _ => 0.0,
        };
        self
    }

    pub fn round_duration_us(&self, max_node_bytes: u64) -> f64 {
        let d = self.round_overhead_us + max_node_bytes as f64 / self.bandwidth_bytes_per_us;
        d.max(self.min_round_us)
    }
}

#[derive(Clone, Debug)]
pub struct ClusterConfig {
    pub num_nodes: u32,
    pub workers_per_node: u16,
    pub num_keys: u64,
    pub value_len: usize,
    pub policy: PolicyMode,
    pub timing: TimingConfig,
    pub location_caches: bool,
    pub value_init: ValueInit,
    pub execution: Execution,
    pub sim: SimTiming,
    /// Record decision events (replay timelines).
    pub record_events: bool,
    /// Record per-round rate estimates of every worker.
    pub record_rates: bool,
    /// Run invariant checks after every simulated round.
    pub check_invariants: bool,
    /// Per-node memory budget in bytes, if any.
    pub memory_budget: Option<u64>,
    /// Number of transport channels per peer. Recorded, not studied.
    pub channels: u32,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            num_nodes: 4,
            workers_per_node: 4,
            num_keys: 1024,
            value_len: 8,
            policy: PolicyMode::AdaPM,
            timing: TimingConfig::default(),
            location_caches: true,
            value_init: ValueInit::Zero,
            execution: Execution::Parallel,
            sim: SimTiming::default(),
            record_events: false,
            record_rates: false,
            check_invariants: false,
            memory_budget: None,
            channels: 4,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::Config("at least one node is required".into()));
        }
        if self.workers_per_node == 0 {
            return Err(Error::Config("at least one worker per node is required".into()));
        }
        if self.num_keys == 0 {
            return Err(Error::Config("key space is empty".into()));
        }
        if self.value_len == 0 {
            return Err(Error::Config("value length must be positive".into()));
        }
        self.timing.validate()?;
        if let Some(budget) = self.memory_budget {
            let needed = self.memory_needed_per_node();
            if needed > budget {
                return Err(Error::OutOfMemory { needed, budget });
            }
        }
        Ok(())
    }

    /// Bytes of parameter storage a node needs at peak under the policy.
    pub fn memory_needed_per_node(&self) -> u64 {
        let model = self.num_keys * self.value_len as u64 * 4;
        match self.policy {
            PolicyMode::FullReplication => model,
            _ => model.div_ceil(self.num_nodes as u64),
        }
    }

    pub fn total_workers(&self) -> usize {
        self.num_nodes as usize * self.workers_per_node as usize
    }
}

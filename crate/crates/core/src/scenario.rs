//! Scripted replay of intent scenarios.
//!
//! An intent script is line-oriented text:
//!
//! ```text
//! # comment
//! intent <node> <worker> <key> <c_start> <c_end>
//! advance <node> <worker> [count]
//! round
//! ```
//!
//! Directives before a `round` line take effect during the worker window
//! that precedes that round. The cluster has as many nodes, workers per node
//! and keys as the script mentions. Replay produces the placement timeline
//! as CSV `round,event,key,node`.

use std::fmt::Write as _;

use crate::cluster::SimCluster;
use crate::config::{ClusterConfig, Execution, PolicyMode};
use crate::error::{Error, Result};
use crate::model::{Clock, Intent, Key, NodeId, WorkerId};
use crate::node::{Event, EventKind};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Directive {
    Intent {
        node: u32,
        worker: u16,
        key: u64,
        c_start: Clock,
        c_end: Clock,
    },
    Advance {
        node: u32,
        worker: u16,
        count: u64,
    },
    Round,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IntentScript {
    /// Directives with their 1-based line numbers.
    pub directives: Vec<(usize, Directive)>,
}

impl IntentScript {
    pub fn parse(text: &str) -> Result<Self> {
        let mut directives = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let words: Vec<&str> = content.split_whitespace().collect();
            let err = |message: String| Error::Script { line, message };
            let num = |idx: usize, what: &str| -> Result<u64> {
                words[idx]
                    .parse::<u64>()
                    .map_err(|_| err(format!("{what} must be a non-negative integer, got `{}`", words[idx])))
            };
            let arity = |n: &[usize]| -> Result<()> {
                if n.contains(&(words.len() - 1)) {
                    Ok(())
                } else {
                    Err(err(format!(
                        "`{}` takes {:?} arguments, got {}",
                        words[0],
                        n,
                        words.len() - 1
                    )))
                }
            };
            let d = match words[0] {
                "round" => {
                    arity(&[0])?;
                    Directive::Round
                }
                "advance" => {
                    arity(&[2, 3])?;
                    let count = if words.len() == 4 { num(3, "count")? } else { 1 };
                    Directive::Advance {
                        node: small(num(1, "node")?, line)?,
                        worker: small(num(2, "worker")?, line)?,
                        count,
                    }
                }
                "intent" => {
                    arity(&[5])?;
                    let (c_start, c_end) = (num(4, "c_start")?, num(5, "c_end")?);
                    if c_start >= c_end {
                        return Err(err(format!("empty intent window [{c_start}, {c_end})")));
                    }
                    Directive::Intent {
                        node: small(num(1, "node")?, line)?,
                        worker: small(num(2, "worker")?, line)?,
                        key: num(3, "key")?,
                        c_start,
                        c_end,
                    }
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            };
            directives.push((line, d));
        }
        Ok(IntentScript { directives })
    }

    /// Cluster shape implied by the script: nodes, workers per node, keys.
    pub fn shape(&self) -> (u32, u16, u64) {
        let (mut nodes, mut workers, mut keys) = (1u32, 1u16, 1u64);
        for (_, d) in &self.directives {
            match *d {
                Directive::Intent { node, worker, key, .. } => {
                    nodes = nodes.max(node + 1);
                    workers = workers.max(worker + 1);
                    keys = keys.max(key + 1);
                }
                Directive::Advance { node, worker, .. } => {
                    nodes = nodes.max(node + 1);
                    workers = workers.max(worker + 1);
                }
                Directive::Round => {}
            }
        }
        (nodes, workers, keys)
    }
}

fn small<T: TryFrom<u64>>(v: u64, line: usize) -> Result<T> {
    T::try_from(v).map_err(|_| Error::Script {
        line,
        message: format!("{v} is too large"),
    })
}

/// Replays `script` under AdaPM.
pub fn run_simulated_scenario(script: &IntentScript) -> Result<Vec<Event>> {
    run_scenario(script, PolicyMode::AdaPM)
}

pub fn run_scenario(script: &IntentScript, policy: PolicyMode) -> Result<Vec<Event>> {
    if script.directives.is_empty() {
        return Ok(Vec::new());
    }
    let (num_nodes, workers_per_node, num_keys) = script.shape();
    let cfg = ClusterConfig {
        num_nodes,
        workers_per_node,
        num_keys,
        value_len: 1,
        policy,
        execution: Execution::Sequential,
        record_events: true,
        check_invariants: true,
        ..ClusterConfig::default()
    };
    let mut cluster = SimCluster::new(cfg)?;
    for (line, d) in &script.directives {
        let at = |e: Error| Error::Script {
            line: *line,
            message: e.to_string(),
        };
        match *d {
            Directive::Intent {
                node,
                worker,
                key,
                c_start,
                c_end,
            } => {
                let intent =
                    Intent::new(WorkerId::new(NodeId(node), worker), vec![Key(key)], c_start, c_end).map_err(at)?;
                cluster
                    .node(NodeId(node))
                    .registry()
                    .signal_intent(&intent)
                    .map_err(at)?;
            }
            Directive::Advance { node, worker, count } => {
                let reg = cluster.node(NodeId(node)).registry();
                for _ in 0..count {
                    reg.advance_clock(worker);
                }
            }
            Directive::Round => {
                cluster.step()?;
            }
        }
    }
    cluster.run_until_silent(1_000)?;
    let report = cluster.invariants();
    if !report.is_clean() {
        return Err(Error::Config(format!(
            "scenario broke an invariant: {:?}",
            report.examples
        )));
    }
    Ok(cluster.events().to_vec())
}

pub const TIMELINE_HEADER: &str = "round,event,key,node";

pub fn timeline_csv(events: &[Event]) -> String {
    let mut s = String::from(TIMELINE_HEADER);
    s.push('\n');
    for e in events {
        let _ = writeln!(s, "{},{},{},{}", e.round, e.kind.name(), e.key, e.node);
    }
    s
}

pub fn parse_timeline_csv(text: &str) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == TIMELINE_HEADER) {
            continue;
        }
        let bad = || Error::Script {
            line: line_no,
            message: format!("malformed timeline row `{line}`"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(Event {
            round: f[0].parse().map_err(|_| bad())?,
            kind: EventKind::parse(f[1]).ok_or_else(bad)?,
            key: Key(f[2].parse().map_err(|_| bad())?),
            node: NodeId(f[3].parse().map_err(|_| bad())?),
        });
    }
    Ok(out)
}

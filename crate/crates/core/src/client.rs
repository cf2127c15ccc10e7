//! Worker-facing API: intent, clock, pull and push.
//!
//! ```
//! use std::sync::Arc;
//! use intentps_core::client::{Client, NoRemote};
//! use intentps_core::node::Node;
//! use intentps_core::{ClusterConfig, Key, NodeId, UpdateDelta};
//!
//! let cfg = Arc::new(ClusterConfig { num_nodes: 1, workers_per_node: 1, num_keys: 4, value_len: 2, ..Default::default() });
//! let node = Node::new(NodeId(0), cfg);
//! let client = Client::new(&node, &NoRemote);
//! client.intent(0, &[Key(1)], 0, 1, None).unwrap();
//! client.push(0, &[UpdateDelta::new(Key(1), vec![1.0, 2.0])]).unwrap();
//! assert_eq!(client.pull(0, &[Key(1)]).unwrap(), vec![vec![1.0, 2.0]]);
//! assert_eq!(client.advance_clock(0), 1);
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Clock, Intent, IntentType, Key, NodeId, UpdateDelta, WorkerId};
use crate::node::Node;

/// Values fetched synchronously from other nodes, in request order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RemoteRead {
    pub values: Vec<Vec<f32>>,
    /// Simulated latency of the exchange; zero for real transports.
    pub cost_us: f64,
}

/// Synchronous access to keys the local node holds no copy of.
pub trait RemoteAccess: Sync {
    /// Reads `keys` starting at `target`, following forwards as needed.
    fn read(&self, from: &Node, target: NodeId, keys: &[Key]) -> Result<RemoteRead>;
}

/// For single-node use: every key is local.
pub struct NoRemote;

impl RemoteAccess for NoRemote {
    fn read(&self, _from: &Node, target: NodeId, keys: &[Key]) -> Result<RemoteRead> {
        Err(Error::Remote(format!(
            "no remote access configured ({} keys at node {target})",
            keys.len()
        )))
    }
}

/// Result of [`Client::pull_at`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pulled {
    pub values: Vec<Vec<f32>>,
    /// Number of synchronous exchanges (one per first-hop destination).
    pub remote_messages: usize,
    pub remote_cost_us: f64,
}

pub struct Client<'a> {
    node: &'a Node,
    remote: &'a dyn RemoteAccess,
}

impl<'a> Client<'a> {
    pub fn new(node: &'a Node, remote: &'a dyn RemoteAccess) -> Self {
        Client { node, remote }
    }

    pub fn node(&self) -> &'a Node {
        self.node
    }

    /// Declares that `worker` will access `keys` while its clock is in
    /// `[c_start, c_end)`.
    pub fn intent(
        &self,
        worker: u16,
        keys: &[Key],
        c_start: Clock,
        c_end: Clock,
        intent_type: Option<IntentType>,
    ) -> Result<()> {
        let intent = Intent::new(WorkerId::new(self.node.id(), worker), keys.to_vec(), c_start, c_end)?
            .with_type(intent_type.unwrap_or_default());
        self.node.registry().signal_intent(&intent)
    }

    pub fn advance_clock(&self, worker: u16) -> Clock {
        self.node.registry().advance_clock(worker)
    }

    pub fn clock(&self, worker: u16) -> Clock {
        self.node.registry().clock(worker)
    }

    pub fn pull(&self, _worker: u16, keys: &[Key]) -> Result<Vec<Vec<f32>>> {
        Ok(self.pull_at(keys, self.node.now())?.values)
    }

    /// Pull with an explicit timestamp for staleness accounting. Keys without
    /// a local copy are fetched with one exchange per first-hop node.
    pub fn pull_at(&self, keys: &[Key], now: f64) -> Result<Pulled> {
        let mut out: Vec<Option<Vec<f32>>> = Vec::with_capacity(keys.len());
        let mut remote: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for (i, &key) in keys.iter().enumerate() {
            match self.node.pull_local(key, now)? {
                Some(v) => out.push(Some(v)),
                None => {
                    remote.entry(self.node.route_target(key)).or_default().push(i);
                    out.push(None);
                }
            }
        }
        let mut pulled = Pulled {
            remote_messages: remote.len(),
            ..Pulled::default()
        };
        for (target, idx) in remote {
            let ks: Vec<Key> = idx.iter().map(|&i| keys[i]).collect();
            let r = self.remote.read(self.node, target, &ks)?;
            pulled.remote_cost_us += r.cost_us;
            for (i, v) in idx.into_iter().zip(r.values) {
                out[i] = Some(v);
            }
        }
        pulled.values = out
            .into_iter()
            .map(|v| v.ok_or_else(|| Error::Remote("remote read returned too few values".into())))
            .collect::<Result<_>>()?;
        Ok(pulled)
    }

    /// Applies updates locally or queues them; never waits on the network.
    pub fn push(&self, _worker: u16, deltas: &[UpdateDelta]) -> Result<()> {
        for d in deltas {
            self.node.push(d.key, &d.components)?;
        }
        Ok(())
    }

    /// Marks the worker as finished.
    pub fn retire(&self, worker: u16) {
        self.node.retire_worker(worker);
    }
}

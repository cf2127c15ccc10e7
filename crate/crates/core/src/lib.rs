//! Core of an intent-driven parameter manager.
//!
//! Workers declare which parameters they will touch in a future window of
//! their logical clock. Every node aggregates those declarations and ships
//! them, together with replica updates and relocations, in one grouped
//! request/response exchange per node pair and round. The current owner of a
//! parameter decides per parameter whether to move its main copy or to keep
//! short-lived replicas, and a per-worker rate estimator decides when an
//! intent must be acted on.
//!
//! The crate contains the engine ([`node::Node`]), a deterministic
//! multi-node simulator ([`cluster::SimCluster`]), scenario replay
//! ([`scenario`]), transports, and the worker-facing API ([`client`]).

pub mod client;
pub mod cluster;
pub mod config;
pub mod decision;
pub mod error;
pub mod metrics;
pub mod model;
pub mod node;
mod par;
pub mod realtime;
pub mod registry;
pub mod routing;
pub mod scenario;
pub mod store;
pub mod stress;
pub mod timing;
pub mod transport;
pub mod wire;

pub use config::{ClusterConfig, Execution, PolicyMode, SimTiming, TimingConfig, ValueInit};
pub use error::{Error, Result};
pub use model::{
    intent_state, Clock, Intent, IntentState, IntentType, Key, NodeId, RoundIndex, UpdateDelta, Version, WorkerId,
};

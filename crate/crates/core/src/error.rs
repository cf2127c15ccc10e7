use std::io;

use thiserror::Error;

use crate::model::{Clock, Key, NodeId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("intent window is empty: c_start={c_start} must be below c_end={c_end}")]
    InvalidIntentWindow { c_start: Clock, c_end: Clock },

    #[error("key {key} outside key space of {num_keys} keys")]
    KeyOutOfRange { key: Key, num_keys: u64 },

    #[error("value length mismatch for key {key}: expected {expected}, got {got}")]
    ValueLength { key: Key, expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("out of memory: {needed} bytes needed per node, budget is {budget} bytes")]
    OutOfMemory { needed: u64, budget: u64 },

    #[error("malformed frame: {0}")]
    Decode(String),

    #[error("script line {line}: {message}")]
    Script { line: usize, message: String },

    #[error("peer {peer} unreachable after {attempts} attempts")]
    PeerUnreachable { peer: NodeId, attempts: u32 },

    #[error("remote access failed: {0}")]
    Remote(String),

    #[error("transport closed")]
    TransportClosed,

    #[error("routing loop for key {key}: exceeded {hops} hops")]
    RoutingLoop { key: Key, hops: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Transport-level failures the caller may retry.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::PeerUnreachable { .. } | Error::Remote(_) | Error::Io(_))
    }
}

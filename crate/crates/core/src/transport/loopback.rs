//! In-process delivery over channels.

use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender, TryRecvError};

use super::{EnvelopeCounters, Transport};
use crate::error::{Error, Result};
use crate::model::NodeId;

/// Creates connected endpoints for `n` nodes.
pub struct LoopbackHub;

impl LoopbackHub {
    pub fn build(n: u32) -> Vec<LoopbackTransport> {
        let counters = Arc::new(EnvelopeCounters::default());
        let (txs, rxs): (Vec<_>, Vec<_>) = (0..n).map(|_| unbounded()).unzip();
        let txs: Arc<[Sender<(NodeId, Vec<u8>)>]> = txs.into();
        rxs.into_iter()
            .enumerate()
            .map(|(i, rx)| LoopbackTransport {
                node: NodeId(i as u32),
                peers: txs.clone(),
                inbox: rx,
                counters: counters.clone(),
            })
            .collect()
    }
}

pub struct LoopbackTransport {
    node: NodeId,
    peers: Arc<[Sender<(NodeId, Vec<u8>)>]>,
    inbox: Receiver<(NodeId, Vec<u8>)>,
    counters: Arc<EnvelopeCounters>,
}

impl LoopbackTransport {
    /// Every frame currently queued, in arrival order.
    pub fn drain(&self) -> Vec<(NodeId, Vec<u8>)> {
        let mut out = Vec::new();
        loop {
            match self.inbox.try_recv() {
                Ok(f) => out.push(f),
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => return out,
            }
        }
    }

    pub fn shared_counters(&self) -> Arc<EnvelopeCounters> {
        self.counters.clone()
    }
}

impl Transport for LoopbackTransport {
    fn node(&self) -> NodeId {
        self.node
    }

    fn num_nodes(&self) -> u32 {
        self.peers.len() as u32
    }

    fn send(&self, to: NodeId, frame: Vec<u8>) -> Result<()> {
        let tx = self
            .peers
            .get(to.index())
            .ok_or_else(|| Error::InvalidArgument(format!("no node {to} in a cluster of {}", self.peers.len())))?;
        self.counters.observe(&frame);
        tx.send((self.node, frame)).map_err(|_| Error::TransportClosed)
    }

    fn recv_timeout(&self, timeout: Duration) -> Result<Option<(NodeId, Vec<u8>)>> {
        match self.inbox.recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(Error::TransportClosed),
        }
    }

    fn counters(&self) -> &EnvelopeCounters {
        &self.counters
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_between_a_pair_arrive_in_order() {
        let eps = LoopbackHub::build(3);
        for i in 0..100u8 {
            eps[0].send(NodeId(2), vec![i]).unwrap();
        }
        let got: Vec<u8> = eps[2]
            .drain()
            .into_iter()
            .map(|(from, f)| {
                assert_eq!(from, NodeId(0));
                f[0]
            })
            .collect();
        assert_eq!(got, (0..100).collect::<Vec<_>>());
        assert!(eps[1].drain().is_empty());
    }

    #[test]
    fn unknown_peer_is_rejected() {
        let eps = LoopbackHub::build(2);
        assert!(eps[0].send(NodeId(5), vec![]).is_err());
    }
}

//! Home nodes, location caches and forwarding.
//!
//! Every key has a static home node that tracks its current owner. Senders
//! address messages to the owner they last heard of; stale guesses are
//! forwarded, first via tombstones left by recent relocations, then via the
//! home node.

use std::collections::HashMap;

use crate::model::{Key, NodeId};

/// Upper bound on forwarding before a message is reported as looping.
pub const MAX_HOPS: u8 = 16;

#[inline]
pub fn home_node(key: Key, num_nodes: u32) -> NodeId {
    NodeId((key.0 % num_nodes as u64) as u32)
}

/// Where a key's owner was learned from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocationSource {
    RelocationNotice,
    SyncResponse,
    RemoteAccessResponse,
}

/// Where a message for a key that arrived here goes next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteStep {
    Local,
    Forward(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct DirEntry {
    owner: NodeId,
    epoch: u64,
}

#[derive(Debug)]
pub struct Router {
    node: NodeId,
    num_nodes: u32,
    caches: bool,
    /// Hints about other nodes' keys.
    cache: HashMap<Key, NodeId>,
    /// Keys this node handed off and whose home has not confirmed the move.
    tombstones: HashMap<Key, DirEntry>,
    /// Owners of keys homed here that live elsewhere. Absent means the home
    /// node itself.
    directory: HashMap<Key, DirEntry>,
    /// Epochs of keys homed here and owned here.
    local_epochs: HashMap<Key, u64>,
}

impl Router {
    pub fn new(node: NodeId, num_nodes: u32, caches: bool) -> Self {
        Router {
            node,
            num_nodes,
            caches,
            cache: HashMap::new(),
            tombstones: HashMap::new(),
            directory: HashMap::new(),
            local_epochs: HashMap::new(),
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn home(&self, key: Key) -> NodeId {
        home_node(key, self.num_nodes)
    }

    pub fn is_home(&self, key: Key) -> bool {
        self.home(key) == self.node
    }

    /// First destination for a message about `key` sent by this node.
    pub fn route_target(&self, key: Key) -> NodeId {
        if self.caches {
            if let Some(&n) = self.cache.get(&key) {
                return n;
            }
        }
        if self.is_home(key) {
            return self.directory_owner(key);
        }
        self.home(key)
    }

    /// Next hop for a message about `key` that reached this node.
    pub fn forward_if_not_owner(&self, key: Key, owns: bool) -> RouteStep {
        if owns {
            return RouteStep::Local;
        }
        if let Some(t) = self.tombstones.get(&key) {
            return RouteStep::Forward(t.owner);
        }
        if self.is_home(key) {
            let owner = self.directory_owner(key);
            if owner != self.node {
                return RouteStep::Forward(owner);
            }
        }
        RouteStep::Forward(self.home(key))
    }

    /// Owner according to the home directory. Only meaningful at the home.
    pub fn directory_owner(&self, key: Key) -> NodeId {
        self.directory.get(&key).map_or(self.node, |e| e.owner)
    }

    pub fn record_location_update(&mut self, key: Key, new_owner: NodeId, _source: LocationSource) {
        if !self.caches || new_owner == self.node {
            self.cache.remove(&key);
            return;
        }
        self.cache.insert(key, new_owner);
    }

    /// Applies a relocation notice at the home node. Returns false if a newer
    /// move was already recorded.
    pub fn update_directory(&mut self, key: Key, owner: NodeId, epoch: u64) -> bool {
        debug_assert!(self.is_home(key));
        let current = self.directory_epoch(key);
        if epoch <= current {
            return false;
        }
        if owner == self.node {
            self.directory.remove(&key);
            self.local_epochs.insert(key, epoch);
        } else {
            self.directory.insert(key, DirEntry { owner, epoch });
            self.local_epochs.remove(&key);
        }
        true
    }

    fn directory_epoch(&self, key: Key) -> u64 {
        self.directory
            .get(&key)
            .map(|e| e.epoch)
            .or_else(|| self.local_epochs.get(&key).copied())
            .unwrap_or(0)
    }

    /// The main copy left this node for `to`.
    pub fn relocated_away(&mut self, key: Key, to: NodeId, epoch: u64) {
        if self.is_home(key) {
            self.update_directory(key, to, epoch);
        } else {
            self.tombstones.insert(key, DirEntry { owner: to, epoch });
        }
        self.record_location_update(key, to, LocationSource::RelocationNotice);
    }

    /// The main copy arrived here.
    pub fn relocated_here(&mut self, key: Key, epoch: u64) {
        self.tombstones.remove(&key);
        self.cache.remove(&key);
        if self.is_home(key) {
            self.update_directory(key, self.node, epoch);
        }
    }

    /// The home confirmed a relocation this node announced.
    pub fn acknowledge(&mut self, key: Key, epoch: u64) {
        if self.tombstones.get(&key).is_some_and(|t| t.epoch <= epoch) {
            self.tombstones.remove(&key);
        }
    }

    pub fn tombstone_count(&self) -> usize {
        self.tombstones.len()
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }
}

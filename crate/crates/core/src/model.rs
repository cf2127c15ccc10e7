//! Shared vocabulary: keys, nodes, workers, clocks, versions and intents.

use std::fmt;

use crate::error::{Error, Result};

/// Per-worker logical clock, advanced once per processed batch.
pub type Clock = u64;

/// Index of a communication round.
pub type RoundIndex = u64;

/// Parameter identifier in the dense key space `0..num_keys`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Key(pub u64);

impl Key {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A worker is identified by its node and its index on that node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WorkerId {
    pub node: NodeId,
    pub local: u16,
}

impl WorkerId {
    pub fn new(node: NodeId, local: u16) -> Self {
        WorkerId { node, local }
    }
}

/// Version of a parameter's main copy. Incremented by the owner once per
/// merged batch of updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Version(pub u64);

impl Version {
    pub fn next(self) -> Version {
        Version(self.0 + 1)
    }
}

/// Additive update for one key.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateDelta {
    pub key: Key,
    pub components: Vec<f32>,
}

impl UpdateDelta {
    pub fn new(key: Key, components: Vec<f32>) -> Self {
        UpdateDelta { key, components }
    }
}

/// Recorded but never consulted by any decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum IntentType {
    Read,
    Write,
    #[default]
    ReadWrite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum IntentState {
    Inactive,
    Active,
    Expired,
}

/// A worker's declaration that it will access `keys` while its clock is in
/// `[c_start, c_end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Intent {
    pub worker: WorkerId,
    pub keys: Vec<Key>,
    pub c_start: Clock,
    pub c_end: Clock,
    pub intent_type: IntentType,
}

impl Intent {
    pub fn new(worker: WorkerId, keys: Vec<Key>, c_start: Clock, c_end: Clock) -> Result<Self> {
        let intent = Intent {
            worker,
            keys,
            c_start,
            c_end,
            intent_type: IntentType::default(),
        };
        intent.validate()?;
        Ok(intent)
    }

    pub fn with_type(mut self, intent_type: IntentType) -> Self {
        self.intent_type = intent_type;
        self
    }

    pub fn node(&self) -> NodeId {
        self.worker.node
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_start >= self.c_end {
            return Err(Error::InvalidIntentWindow {
                c_start: self.c_start,
                c_end: self.c_end,
            });
        }
        Ok(())
    }

    pub fn state(&self, clock: Clock) -> IntentState {
        intent_state(self.c_start, self.c_end, clock)
    }
}

/// Classifies an intent window against a worker clock.
pub fn intent_state(c_start: Clock, c_end: Clock, clock: Clock) -> IntentState {
    if clock < c_start {
        IntentState::Inactive
    } else if clock < c_end {
        IntentState::Active
    } else {
        IntentState::Expired
    }
}

/// Adds `delta` into `acc` component-wise.
#[inline]
pub fn add_into(acc: &mut [f32], delta: &[f32]) {
    debug_assert_eq!(acc.len(), delta.len());
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += *d;
    }
}

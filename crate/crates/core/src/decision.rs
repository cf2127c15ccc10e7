//! Owner-side choice between relocating a parameter and replicating it.

use crate::config::PolicyMode;
use crate::model::NodeId;

/// What the owner changes for one key after its intent membership changed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Decision {
    pub relocate: Option<NodeId>,
    pub create: Vec<NodeId>,
    pub destroy: Vec<NodeId>,
}

impl Decision {
    pub fn is_none(&self) -> bool {
        self.relocate.is_none() && self.create.is_empty() && self.destroy.is_empty()
    }
}

/// A single membership event, for the event-style formulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntentEvent {
    Start(NodeId),
    End(NodeId),
}

/// Reconciles the replica set with the nodes that currently have active
/// intent. `active` is in activation order; `holders` are the current
/// replica holders. The result depends on nothing else.
pub fn reconcile(policy: PolicyMode, owner: NodeId, active: &[NodeId], holders: &[NodeId]) -> Decision {
    let mut d = Decision::default();
    let relocate_to = match policy {
        PolicyMode::AdaPM | PolicyMode::AdaPMImmediateAction => match active {
            [only] if *only != owner => Some(*only),
            _ => None,
        },
        PolicyMode::AdaPMNoReplication => {
            if active.contains(&owner) {
                None
            } else {
                active.first().copied()
            }
        }
        PolicyMode::AdaPMNoRelocation => None,
        // Static policies never change placement after setup.
        PolicyMode::StaticPartitioning | PolicyMode::FullReplication => return d,
    };

    let wanted: Vec<NodeId> = if relocate_to.is_some() || !policy.allows_replication() {
        Vec::new()
    } else {
        active.iter().copied().filter(|&n| n != owner).collect()
    };
    d.relocate = relocate_to;
    d.destroy = holders
        .iter()
        .copied()
        .filter(|h| !wanted.contains(h) && Some(*h) != relocate_to)
        .collect();
    d.create = wanted.into_iter().filter(|n| !holders.contains(n)).collect();
    d
}

/// Event form: applies `event` to the membership and returns the decision.
/// Ends without a matching start leave the membership unchanged.
pub fn owner_decide(
    policy: PolicyMode,
    owner: NodeId,
    active: &mut Vec<NodeId>,
    holders: &[NodeId],
    event: IntentEvent,
) -> Decision {
    match event {
        IntentEvent::Start(n) => {
            if !active.contains(&n) {
                active.push(n);
            }
        }
        IntentEvent::End(n) => active.retain(|&a| a != n),
    }
    reconcile(policy, owner, active, holders)
}

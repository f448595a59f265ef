//! Per-node placement of calls.
//!
//! Every node schedules the calls routed to it. The set of nodes holding warm
//! Faaslets for a function lives in the global tier so all nodes see it. A
//! call runs where a warm instance is, moves to a warm peer, or starts cold on
//! the receiving node, in that order of preference.

pub mod model;
mod warm;

use std::collections::BTreeSet;
use std::sync::Arc;

pub use warm::{warm_key, WarmSets};

use crate::error::Result;
use crate::sandbox::FunctionId;
use crate::state::GlobalTier;

pub type NodeId = String;

/// A call stops moving between nodes after this many shares.
pub const MAX_HOPS: u8 = 2;

pub const DEFAULT_CAPACITY: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    ExecuteLocal,
    Share(NodeId),
    ColdStartLocal,
    /// All local slots are busy and no peer can take the call; it waits in
    /// this node's queue.
    QueueLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reason {
    WarmHere,
    WarmPeer,
    NoWarmPeer,
    HopLimit,
    GlobalUnavailable,
    AtCapacity,
}

/// This node's load for one function.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LocalView {
    /// Faaslets this node currently holds for the function, idle or busy.
    pub faaslets: usize,
    /// Calls of the function executing here now.
    pub running: usize,
}

fn mix(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Rendezvous choice of a peer for `call_id`, never `me`. `None` when the
/// set holds no other node.
pub fn pick_share_target<'a>(hosts: impl IntoIterator<Item = &'a NodeId>, me: &str, call_id: i64) -> Option<NodeId> {
    hosts
        .into_iter()
        .filter(|h| h.as_str() != me)
        .max_by_key(|h| (mix(fnv(h) ^ call_id as u64), *h))
        .cloned()
}

/// The placement rule, free of any I/O.
pub fn decide(
    me: &str,
    view: LocalView,
    capacity: usize,
    warm: &BTreeSet<NodeId>,
    call_id: i64,
    hops: u8,
) -> (Decision, Reason) {
    let has_room = view.running < capacity;
    if view.faaslets > 0 && has_room {
        return (Decision::ExecuteLocal, Reason::WarmHere);
    }
    if hops < MAX_HOPS {
        if let Some(t) = pick_share_target(warm, me, call_id) {
            return (Decision::Share(t), Reason::WarmPeer);
        }
    }
    let reason = if hops >= MAX_HOPS {
        Reason::HopLimit
    } else {
        Reason::NoWarmPeer
    };
    if has_room {
        (Decision::ColdStartLocal, reason)
    } else {
        (Decision::QueueLocal, Reason::AtCapacity)
    }
}

/// One node's scheduler: the placement rule plus the shared warm sets.
pub struct Scheduler {
    me: NodeId,
    capacity: usize,
    warm: WarmSets,
}

impl Scheduler {
    pub fn new(me: impl Into<NodeId>, capacity: usize, global: Arc<dyn GlobalTier>) -> Self {
        Scheduler {
            me: me.into(),
            capacity: capacity.max(1),
            warm: WarmSets::new(global),
        }
    }

    pub fn node_id(&self) -> &str {
        &self.me
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn warm_sets(&self) -> &WarmSets {
        &self.warm
    }

    /// Places one call. `usable` filters warm peers this node can reach.
    /// Cold starts add this node to the warm set before returning.
    pub fn on_call(
        &self,
        id: &FunctionId,
        call_id: i64,
        hops: u8,
        view: LocalView,
        usable: impl Fn(&str) -> bool,
    ) -> (Decision, Reason) {
        let warm = match self.warm.read(id) {
            Ok(w) => w,
            Err(e) => {
                log::warn!("warm set for {id} unavailable ({e}); starting locally");
                return (Decision::ColdStartLocal, Reason::GlobalUnavailable);
            }
        };
        let reachable: BTreeSet<NodeId> = warm.into_iter().filter(|h| *h == self.me || usable(h)).collect();
        let out = decide(&self.me, view, self.capacity, &reachable, call_id, hops);
        if out.0 == Decision::ColdStartLocal && !reachable.contains(&self.me) {
            if let Err(e) = self.warm.add(id, &self.me) {
                log::warn!("could not join warm set for {id}: {e}");
            }
        }
        out
    }

    pub fn mark_warm(&self, id: &FunctionId) -> Result<()> {
        self.warm.add(id, &self.me).map(drop)
    }

    pub fn mark_cold(&self, id: &FunctionId) -> Result<()> {
        self.warm.remove(id, &self.me).map(drop)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str]) -> BTreeSet<NodeId> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn warm_local_runs_here() {
        let v = LocalView {
            faaslets: 1,
            running: 0,
        };
        assert_eq!(decide("A", v, 4, &set(&["A"]), 1, 0).0, Decision::ExecuteLocal);
    }

    #[test]
    fn warm_peer_gets_the_call() {
        let v = LocalView::default();
        assert_eq!(decide("A", v, 4, &set(&["B"]), 1, 0).0, Decision::Share("B".into()));
    }

    #[test]
    fn empty_set_cold_starts() {
        assert_eq!(
            decide("A", LocalView::default(), 4, &set(&[]), 1, 0).0,
            Decision::ColdStartLocal
        );
    }

    #[test]
    fn hop_limit_stops_forwarding() {
        let (d, r) = decide("A", LocalView::default(), 4, &set(&["B"]), 1, MAX_HOPS);
        assert_eq!((d, r), (Decision::ColdStartLocal, Reason::HopLimit));
        let full = LocalView {
            faaslets: 4,
            running: 4,
        };
        assert_eq!(
            decide("A", full, 4, &set(&["A", "B"]), 1, MAX_HOPS).0,
            Decision::QueueLocal
        );
        assert_eq!(
            decide("A", full, 4, &set(&["A", "B"]), 1, 0).0,
            Decision::Share("B".into())
        );
    }

    #[test]
    fn share_target_excludes_self() {
        assert_eq!(pick_share_target(&set(&["A"]), "A", 5), None);
        assert_eq!(pick_share_target(&set(&["A", "B"]), "A", 5), Some("B".into()));
        assert_eq!(pick_share_target(&set(&[]), "A", 5), None);
    }

    #[test]
    fn share_target_is_deterministic() {
        let s = set(&["B", "C", "D"]);
        for id in 0..100 {
            assert_eq!(pick_share_target(&s, "A", id), pick_share_target(&s, "A", id));
        }
    }
}

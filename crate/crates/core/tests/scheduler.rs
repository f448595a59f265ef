use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use faaslite_core::sandbox::FunctionId;
use faaslite_core::scheduler::{
    decide, model, pick_share_target, warm_key, Decision, LocalView, NodeId, Reason, Scheduler, WarmSets,
};
use faaslite_core::state::{GlobalTier, InMemoryGlobalTier, LockMode, LockToken};
use faaslite_core::{Error, Result};

fn fid() -> FunctionId {
    FunctionId::new("u", "f")
}

fn nodes(ids: &[&str]) -> BTreeSet<NodeId> {
    ids.iter().map(|s| s.to_string()).collect()
}

#[test]
fn warm_set_add_read_remove() {
    let g = Arc::new(InMemoryGlobalTier::new());
    let w = WarmSets::new(g.clone());
    assert!(w.read(&fid()).unwrap().is_empty());
    w.add(&fid(), "A").unwrap();
    assert!(w.read(&fid()).unwrap().contains("A"));
    assert!(g.size(&warm_key(&fid())).unwrap().is_some());
    w.remove(&fid(), "A").unwrap();
    assert!(w.read(&fid()).unwrap().is_empty());
}

#[test]
fn concurrent_adds_are_all_kept() {
    let g: Arc<dyn GlobalTier> = Arc::new(InMemoryGlobalTier::new());
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let g = g.clone();
            std::thread::spawn(move || {
                let w = WarmSets::new(g);
                for j in 0..10 {
                    w.add(&fid(), &format!("n{i}-{j}")).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(WarmSets::new(g).read(&fid()).unwrap().len(), 80);
}

#[test]
fn split_between_two_peers_is_even() {
    let s = nodes(&["B", "C"]);
    let n = 10_000;
    let b = (0..n)
        .filter(|&i| pick_share_target(&s, "A", i * 7919 + 3) == Some("B".into()))
        .count() as f64;
    let e = n as f64 / 2.0;
    let chi2 = (b - e).powi(2) / e + ((n as f64 - b) - e).powi(2) / e;
    // One degree of freedom, p = 0.001.
    assert!(chi2 < 10.83, "chi2 = {chi2}, B got {b}");
}

#[test]
fn cold_start_joins_the_warm_set() {
    let g = Arc::new(InMemoryGlobalTier::new());
    let s = Scheduler::new("A", 4, g);
    let (d, _) = s.on_call(&fid(), 1, 0, LocalView::default(), |_| true);
    assert_eq!(d, Decision::ColdStartLocal);
    assert_eq!(s.warm_sets().read(&fid()).unwrap(), nodes(&["A"]));
    let (d, _) = s.on_call(
        &fid(),
        2,
        0,
        LocalView {
            faaslets: 1,
            running: 0,
        },
        |_| true,
    );
    assert_eq!(d, Decision::ExecuteLocal);
}

#[test]
fn calls_follow_the_warm_peer() {
    let g = Arc::new(InMemoryGlobalTier::new());
    let b = Scheduler::new("B", 4, g.clone());
    b.mark_warm(&fid()).unwrap();
    let a = Scheduler::new("A", 4, g);
    for id in 0..100 {
        let (d, r) = a.on_call(&fid(), id, 0, LocalView::default(), |_| true);
        assert_eq!((d, r), (Decision::Share("B".into()), Reason::WarmPeer));
    }
    // An unreachable peer is skipped.
    let (d, _) = a.on_call(&fid(), 1, 0, LocalView::default(), |p| p != "B");
    assert_eq!(d, Decision::ColdStartLocal);
}

#[test]
fn stale_warm_entry_cold_starts_at_the_target() {
    // A believes B is warm; B has since evicted its Faaslets.
    let warm = nodes(&["B"]);
    let (d, _) = decide("A", LocalView::default(), 4, &warm, 9, 0);
    assert_eq!(d, Decision::Share("B".into()));
    let (d, _) = decide("B", LocalView::default(), 4, &warm, 9, 1);
    assert_eq!(d, Decision::ColdStartLocal);
    // Two full nodes bounce once each way, then the call stays put.
    let full = LocalView {
        faaslets: 2,
        running: 2,
    };
    let warm = nodes(&["A", "B"]);
    assert_eq!(decide("A", full, 2, &warm, 9, 0).0, Decision::Share("B".into()));
    assert_eq!(decide("B", full, 2, &warm, 9, 1).0, Decision::Share("A".into()));
    assert_eq!(decide("A", full, 2, &warm, 9, 2).0, Decision::QueueLocal);
}

struct Down;

impl GlobalTier for Down {
    fn read(&self, _: &str, _: u64, _: u64) -> Result<Vec<u8>> {
        Err(Error::Transport("down".into()))
    }
    fn write(&self, _: &str, _: u64, _: &[u8]) -> Result<()> {
        Err(Error::Transport("down".into()))
    }
    fn put(&self, _: &str, _: &[u8]) -> Result<()> {
        Err(Error::Transport("down".into()))
    }
    fn delete(&self, _: &str) -> Result<()> {
        Err(Error::Transport("down".into()))
    }
    fn append(&self, _: &str, _: &[u8]) -> Result<()> {
        Err(Error::Transport("down".into()))
    }
    fn read_appended(&self, _: &str) -> Result<Vec<Vec<u8>>> {
        Err(Error::Transport("down".into()))
    }
    fn size(&self, _: &str) -> Result<Option<u64>> {
        Err(Error::Transport("down".into()))
    }
    fn lock(&self, _: &str, _: LockMode, _: Duration, _: Duration) -> Result<LockToken> {
        Err(Error::Transport("down".into()))
    }
    fn unlock(&self, _: &str, _: LockToken) -> Result<()> {
        Err(Error::Transport("down".into()))
    }
}

#[test]
fn unreachable_global_tier_degrades_to_local() {
    let s = Scheduler::new("A", 4, Arc::new(Down));
    let (d, r) = s.on_call(&fid(), 1, 0, LocalView::default(), |_| true);
    assert_eq!((d, r), (Decision::ColdStartLocal, Reason::GlobalUnavailable));
}

#[test]
fn exhaustive_interleavings_lose_no_calls() {
    for n in 1..=3 {
        for k in 1..=4 {
            for cap in 1..=2 {
                let e = model::explore(n, k, cap).unwrap_or_else(|v| panic!("{v}"));
                assert!(
                    e.terminals > 0 && e.states >= e.terminals,
                    "{n} nodes {k} calls cap {cap}"
                );
            }
        }
    }
}

#[test]
fn model_rejects_unsupported_sizes() {
    assert!(model::explore(4, 1, 1).is_err());
    assert!(model::explore(1, 1, 0).is_err());
}

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::sandbox::{Faaslet, FunctionId};
use crate::scheduler::LocalView;

struct Idle {
    faaslet: Faaslet,
    version: u32,
    since: Instant,
}

#[derive(Default)]
struct State {
    idle: Vec<Idle>,
    /// Faaslets in existence, idle or busy, plus slots reserved for one
    /// about to be created.
    total: usize,
    running: usize,
    next_ticket: u64,
    serving: u64,
}

#[derive(Default)]
struct FnPool {
    state: Mutex<State>,
    turn: Condvar,
}

/// Warm Faaslets per function, bounded by a per-function capacity. Callers
/// beyond the bound wait in arrival order.
pub struct Pool {
    capacity: usize,
    fns: Mutex<HashMap<FunctionId, Arc<FnPool>>>,
}

/// A granted execution slot, with a warm Faaslet when one was idle.
pub struct Slot {
    id: FunctionId,
    pool: Arc<FnPool>,
    pub faaslet: Option<Faaslet>,
}

impl Slot {
    pub fn function(&self) -> &FunctionId {
        &self.id
    }
}

impl Pool {
    pub fn new(capacity: usize) -> Self {
        Pool {
            capacity: capacity.max(1),
            fns: Mutex::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn entry(&self, id: &FunctionId) -> Arc<FnPool> {
        self.fns.lock().entry(id.clone()).or_default().clone()
    }

    pub fn view(&self, id: &FunctionId) -> LocalView {
        match self.fns.lock().get(id) {
            Some(p) => {
                let s = p.state.lock();
                LocalView {
                    faaslets: s.total,
                    running: s.running,
                }
            }
            None => LocalView::default(),
        }
    }

    /// Callers waiting for a slot, including one being granted.
    pub fn queued(&self, id: &FunctionId) -> usize {
        match self.fns.lock().get(id) {
            Some(p) => {
                let s = p.state.lock();
                (s.next_ticket - s.serving) as usize
            }
            None => 0,
        }
    }

    /// Blocks until the caller's turn and a free slot. Idle Faaslets of
    /// other versions are discarded on the way.
    pub fn acquire(&self, id: &FunctionId, version: u32) -> Slot {
        let pool = self.entry(id);
        let mut s = pool.state.lock();
        let ticket = s.next_ticket;
        s.next_ticket += 1;
        while !(s.serving == ticket && s.running < self.capacity) {
            pool.turn.wait(&mut s);
        }
        s.serving += 1;
        s.running += 1;
        let before = s.idle.len();
        s.idle.retain(|i| i.version == version);
        s.total -= before - s.idle.len();
        let faaslet = s.idle.pop().map(|i| i.faaslet);
        if faaslet.is_none() {
            s.total += 1;
        }
        drop(s);
        pool.turn.notify_all();
        Slot {
            id: id.clone(),
            pool,
            faaslet,
        }
    }

    /// Ends a call. A Faaslet handed back becomes idle; `None` means the
    /// instance was lost and its place is freed.
    pub fn release(&self, slot: Slot, faaslet: Option<Faaslet>, version: u32) {
        let mut s = slot.pool.state.lock();
        s.running -= 1;
        match faaslet {
            Some(faaslet) => s.idle.push(Idle {
                faaslet,
                version,
                since: Instant::now(),
            }),
            None => s.total -= 1,
        }
        drop(s);
        slot.pool.turn.notify_all();
    }

    /// Drops idle Faaslets of versions other than `version`.
    pub fn retire(&self, id: &FunctionId, version: u32) {
        let pool = self.entry(id);
        let mut s = pool.state.lock();
        let before = s.idle.len();
        s.idle.retain(|i| i.version == version);
        s.total -= before - s.idle.len();
    }

    /// Destroys Faaslets idle for longer than `ttl`. Returns the functions
    /// left without any Faaslet.
    pub fn evict_idle(&self, ttl: Duration) -> Vec<FunctionId> {
        let now = Instant::now();
        let mut emptied = Vec::new();
        for (id, pool) in self.fns.lock().iter() {
            let mut s = pool.state.lock();
            let before = s.idle.len();
            s.idle.retain(|i| now.duration_since(i.since) <= ttl);
            let gone = before - s.idle.len();
            s.total -= gone;
            if gone > 0 && s.total == 0 {
                emptied.push(id.clone());
            }
        }
        emptied
    }

    /// Functions with at least one Faaslet here.
    pub fn warm_functions(&self) -> Vec<FunctionId> {
        self.fns
            .lock()
            .iter()
            .filter(|(_, p)| p.state.lock().total > 0)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

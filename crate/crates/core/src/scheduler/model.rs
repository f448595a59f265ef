//! Exhaustive model of a small cluster driven by [`decide`].
//!
//! Every reachable interleaving of arrivals, share deliveries, completions,
//! evictions and warm-set reconciliation is explored. A run fails if a call
//! is lost, a node runs more than its capacity or a call exceeds the hop
//! limit.

use std::collections::{BTreeSet, HashSet, VecDeque};

use super::{decide, Decision, LocalView, NodeId, MAX_HOPS};

/// Largest cluster the model names nodes for.
pub const MAX_NODES: usize = 3;

const NAMES: [&str; MAX_NODES] = ["n0", "n1", "n2"];

/// Evictions per run; bounds the state space.
const MAX_EVICTIONS: u8 = 2;

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
enum Status {
    NotArrived,
    InFlight { to: usize, hops: u8 },
    Queued(usize),
    Running(usize),
    Done { node: usize, output: i64 },
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
struct Node {
    faaslets: usize,
    running: usize,
    queue: VecDeque<usize>,
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
struct World {
    warm: BTreeSet<usize>,
    nodes: Vec<Node>,
    calls: Vec<Status>,
    hops: Vec<u8>,
    evictions: u8,
}

/// Counts from a completed exploration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Explored {
    pub states: usize,
    pub terminals: usize,
}

/// A broken property, with the state that shows it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn call_id(c: usize) -> i64 {
    c as i64 * 0x9e37 + 11
}

impl World {
    fn new(n: usize, k: usize) -> Self {
        let node = Node {
            faaslets: 0,
            running: 0,
            queue: VecDeque::new(),
        };
        World {
            warm: BTreeSet::new(),
            nodes: vec![node; n],
            calls: vec![Status::NotArrived; k],
            hops: vec![0; k],
            evictions: 0,
        }
    }

    fn start(&mut self, n: usize, c: usize) {
        let node = &mut self.nodes[n];
        node.running += 1;
        if node.faaslets < node.running {
            node.faaslets = node.running;
            self.warm.insert(n);
        }
        self.calls[c] = Status::Running(n);
    }

    fn schedule(&mut self, n: usize, c: usize, hops: u8, cap: usize) {
        let warm: BTreeSet<NodeId> = self.warm.iter().map(|&i| NAMES[i].to_string()).collect();
        let view = LocalView {
            faaslets: self.nodes[n].faaslets,
            running: self.nodes[n].running,
        };
        match decide(NAMES[n], view, cap, &warm, call_id(c), hops).0 {
            Decision::ExecuteLocal | Decision::ColdStartLocal => self.start(n, c),
            Decision::Share(t) => {
                let to = NAMES
                    .iter()
                    .position(|x| *x == t)
                    .expect("share target is a modelled node");
                self.hops[c] = hops + 1;
                self.calls[c] = Status::InFlight { to, hops: hops + 1 };
            }
            Decision::QueueLocal => {
                self.nodes[n].queue.push_back(c);
                self.calls[c] = Status::Queued(n);
            }
        }
    }

    fn successors(&self, cap: usize) -> Vec<World> {
        let mut out = Vec::new();
        let n = self.nodes.len();
        // Calls arrive in id order, each at any node.
        if let Some(c) = self.calls.iter().position(|s| *s == Status::NotArrived) {
            for entry in 0..n {
                let mut w = self.clone();
                w.schedule(entry, c, 0, cap);
                out.push(w);
            }
        }
        for (c, s) in self.calls.iter().enumerate() {
            match *s {
                Status::InFlight { to, hops } => {
                    let mut w = self.clone();
                    w.schedule(to, c, hops, cap);
                    out.push(w);
                }
                Status::Running(node) => {
                    let mut w = self.clone();
                    w.nodes[node].running -= 1;
                    w.calls[c] = Status::Done {
                        node,
                        output: call_id(c),
                    };
                    if let Some(next) = w.nodes[node].queue.pop_front() {
                        w.start(node, next);
                    }
                    out.push(w);
                }
                _ => {}
            }
        }
        for i in 0..n {
            let node = &self.nodes[i];
            if self.evictions < MAX_EVICTIONS && node.faaslets > node.running {
                let mut w = self.clone();
                w.nodes[i].faaslets = w.nodes[i].running;
                w.evictions += 1;
                out.push(w);
            }
            let should = node.faaslets > 0;
            if should != self.warm.contains(&i) {
                let mut w = self.clone();
                if should {
                    w.warm.insert(i);
                } else {
                    w.warm.remove(&i);
                }
                out.push(w);
            }
        }
        out
    }

    fn check(&self, cap: usize) -> Result<(), Violation> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.running > cap {
                return Err(Violation(format!("capacity exceeded on n{i}: {self:?}")));
            }
        }
        if self.hops.iter().any(|&h| h > MAX_HOPS) {
            return Err(Violation(format!("hop limit exceeded: {self:?}")));
        }
        Ok(())
    }

    /// In a final state every call has run once and returned its own id,
    /// as a serial executor would.
    fn check_terminal(&self) -> Result<(), Violation> {
        for (c, s) in self.calls.iter().enumerate() {
            match s {
                Status::Done { output, .. } if *output == call_id(c) => {}
                other => return Err(Violation(format!("call {c} lost in {other:?}: {self:?}"))),
            }
        }
        Ok(())
    }
}

/// Explores `n` nodes of capacity `cap` receiving `k` calls.
pub fn explore(n: usize, k: usize, cap: usize) -> Result<Explored, Violation> {
    if n == 0 || n > MAX_NODES || cap == 0 {
        return Err(Violation(format!("unsupported model: {n} nodes, capacity {cap}")));
    }
    let mut seen = HashSet::new();
    let mut stack = vec![World::new(n, k)];
    let mut terminals = 0;
    while let Some(w) = stack.pop() {
        if !seen.insert(w.clone()) {
            continue;
        }
        w.check(cap)?;
        let next = w.successors(cap);
        if next.is_empty() {
            terminals += 1;
            w.check_terminal()?;
        }
        stack.extend(next);
    }
    Ok(Explored {
        states: seen.len(),
        terminals,
    })
}

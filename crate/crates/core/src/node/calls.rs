use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::scheduler::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallStatus {
    Queued,
    Running,
    Completed,
    Failed,
}

impl CallStatus {
    fn rank(self) -> u8 {
        match self {
            CallStatus::Queued => 0,
            CallStatus::Running => 1,
            CallStatus::Completed | CallStatus::Failed => 2,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 2
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub call_id: i64,
    pub user: String,
    pub function: String,
    pub status: CallStatus,
    #[serde(skip)]
    pub input: Arc<[u8]>,
    #[serde(with = "hex_bytes")]
    pub output: Vec<u8>,
    pub return_code: i32,
    pub origin_node: NodeId,
    pub executed_on: Option<NodeId>,
    pub error: Option<String>,
}

impl CallRecord {
    pub fn new(call_id: i64, user: &str, function: &str, input: Vec<u8>, origin: &str) -> Self {
        CallRecord {
            call_id,
            user: user.to_string(),
            function: function.to_string(),
            status: CallStatus::Queued,
            input: input.into(),
            output: Vec::new(),
            return_code: 0,
            origin_node: origin.to_string(),
            executed_on: None,
            error: None,
        }
    }
}

/// Call results persisted for awaiters on other nodes.
pub fn result_key(call_id: i64) -> String {
    format!("__calls/{call_id}")
}

/// The outcome of one call, as carried back to its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub status: CallStatus,
    pub return_code: i32,
    pub output: Vec<u8>,
    pub executed_on: NodeId,
    pub error: Option<String>,
}

struct Entry {
    record: CallRecord,
    finished: Option<Instant>,
}

/// Calls this node knows about, with blocking waits on completion.
#[derive(Default)]
pub struct CallTable {
    calls: Mutex<HashMap<i64, Entry>>,
    changed: Condvar,
}

impl CallTable {
    pub fn insert(&self, record: CallRecord) {
        self.calls
            .lock()
            .insert(record.call_id, Entry { record, finished: None });
    }

    pub fn get(&self, id: i64) -> Option<CallRecord> {
        self.calls.lock().get(&id).map(|e| e.record.clone())
    }

    pub fn len(&self) -> usize {
        self.calls.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Moves a queued call to running. Returns false for any other state.
    pub fn set_running(&self, id: i64, node: &str) -> bool {
        let mut calls = self.calls.lock();
        match calls.get_mut(&id) {
            Some(e) if e.record.status == CallStatus::Queued => {
                e.record.status = CallStatus::Running;
                e.record.executed_on = Some(node.to_string());
                drop(calls);
                self.changed.notify_all();
                true
            }
            _ => false,
        }
    }

    /// Records the outcome once; later outcomes for the same call are
    /// ignored so the status never moves backwards.
    pub fn finish(&self, id: i64, outcome: Outcome) -> Option<CallRecord> {
        let mut calls = self.calls.lock();
        let e = calls.get_mut(&id)?;
        if e.record.status.is_terminal() || !outcome.status.is_terminal() {
            return None;
        }
        e.record.status = outcome.status;
        e.record.return_code = outcome.return_code;
        e.record.output = outcome.output;
        e.record.executed_on = Some(outcome.executed_on);
        e.record.error = outcome.error;
        e.finished = Some(Instant::now());
        let r = e.record.clone();
        drop(calls);
        self.changed.notify_all();
        Some(r)
    }

    /// Waits for a terminal state. `None` if the call is unknown, `Some`
    /// with a non-terminal record on timeout.
    pub fn wait(&self, id: i64, timeout: Option<Duration>) -> Option<CallRecord> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut calls = self.calls.lock();
        loop {
            let r = &calls.get(&id)?.record;
            if r.status.is_terminal() {
                return Some(r.clone());
            }
            match deadline {
                Some(d) => {
                    if self.changed.wait_until(&mut calls, d).timed_out() {
                        return calls.get(&id).map(|e| e.record.clone());
                    }
                }
                None => self.changed.wait(&mut calls),
            }
        }
    }

    /// Forgets calls finished more than `ttl` ago and returns them.
    pub fn purge(&self, ttl: Duration) -> Vec<CallRecord> {
        let now = Instant::now();
        let mut out = Vec::new();
        self.calls.lock().retain(|_, e| match e.finished {
            Some(t) if now.duration_since(t) > ttl => {
                out.push(e.record.clone());
                false
            }
            _ => true,
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn done(code: i32) -> Outcome {
        Outcome {
            status: CallStatus::Completed,
            return_code: code,
            output: b"o".to_vec(),
            executed_on: "n".into(),
            error: None,
        }
    }

    #[test]
    fn transitions_are_monotonic() {
        let t = CallTable::default();
        t.insert(CallRecord::new(1, "u", "f", vec![], "n"));
        assert!(t.set_running(1, "n"));
        assert!(!t.set_running(1, "n"));
        assert!(t.finish(1, done(0)).is_some());
        assert!(t.finish(1, done(5)).is_none());
        assert!(!t.set_running(1, "n"));
        let r = t.get(1).unwrap();
        assert_eq!((r.status, r.return_code), (CallStatus::Completed, 0));
    }

    #[test]
    fn wait_sees_completion_from_another_thread() {
        let t = Arc::new(CallTable::default());
        t.insert(CallRecord::new(2, "u", "f", vec![], "n"));
        let t2 = t.clone();
        let h = std::thread::spawn(move || t2.wait(2, None).unwrap().return_code);
        std::thread::sleep(Duration::from_millis(20));
        t.finish(2, done(3));
        assert_eq!(h.join().unwrap(), 3);
        assert!(t.wait(99, None).is_none());
        t.insert(CallRecord::new(3, "u", "f", vec![], "n"));
        let r = t.wait(3, Some(Duration::from_millis(10))).unwrap();
        assert_eq!(r.status, CallStatus::Queued);
    }

    #[test]
    fn records_round_trip_through_json() {
        let mut r = CallRecord::new(4, "u", "f", b"in".to_vec(), "n");
        r.output = vec![0, 255, 7];
        let back: CallRecord = serde_json::from_slice(&serde_json::to_vec(&r).unwrap()).unwrap();
        assert_eq!(back.output, r.output);
        assert_eq!(back.status, CallStatus::Queued);
        assert!(back.input.is_empty());
    }

    #[test]
    fn purge_drops_old_results() {
        let t = CallTable::default();
        t.insert(CallRecord::new(5, "u", "f", vec![], "n"));
        t.insert(CallRecord::new(6, "u", "f", vec![], "n"));
        t.finish(5, done(0));
        std::thread::sleep(Duration::from_millis(5));
        assert_eq!(t.purge(Duration::ZERO).len(), 1);
        assert!(t.get(5).is_none() && t.get(6).is_some());
    }
}

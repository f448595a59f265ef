//! One runtime instance: Faaslet pool, object store, HTTP control surface
//! and the message bus to its peers.

mod bus;
mod calls;
mod config;
mod http;
mod meter;
mod pool;
mod store;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::Duration;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use bus::{read_frame, Bus, BusMessage};
pub use calls::{result_key, CallRecord, CallStatus, CallTable, Outcome};
pub use config::{NodeConfig, PeerConfig, ENV_PREFIX};
pub use meter::{gb_seconds, BillingMeter};
pub use pool::{Pool, Slot};
pub use store::ObjectStore;

use crate::error::{Error, Result};
use crate::host::{new_call_id, CallContext, CallDispatcher, HostEnv};
use crate::sandbox::{load_object, validate_and_compile, Faaslet, FunctionDef, FunctionId};
use crate::scheduler::{Decision, LocalView, NodeId, Scheduler};
use crate::snapshot::{self, ProtoSnapshot};
use crate::state::{
    CountingGlobalTier, GlobalTier, InMemoryGlobalTier, LocalTier, LocalTierConfig, LockMode, RemoteGlobalTier, Traffic,
};

/// Deployment record of a function, shared by all nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionMeta {
    pub version: u32,
    pub module_hash: String,
}

pub fn function_key(id: &FunctionId) -> String {
    format!("__functions/{}/{}", id.user, id.name)
}

struct Deployed {
    def: Arc<FunctionDef>,
    proto: Arc<ProtoSnapshot>,
    version: u32,
}

/// Where and how each call ran, for tests and benchmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub call_id: i64,
    pub function: FunctionId,
    pub decision: Decision,
    pub hops: u8,
}

pub(crate) struct NodeInner {
    cfg: NodeConfig,
    me: NodeId,
    global: Arc<dyn GlobalTier>,
    traffic: Arc<Traffic>,
    local: Arc<LocalTier>,
    env: Arc<HostEnv>,
    store: Arc<ObjectStore>,
    scheduler: Scheduler,
    pool: Pool,
    calls: CallTable,
    bus: Bus,
    functions: RwLock<HashMap<FunctionId, Arc<Deployed>>>,
    meter: BillingMeter,
    shares_out: AtomicUsize,
    trace: Mutex<Vec<TraceEntry>>,
    stop: AtomicBool,
    stop_cv: (Mutex<()>, Condvar),
}

/// A running node. Dropping it stops the node.
pub struct Node {
    inner: Arc<NodeInner>,
    http: Option<http::HttpServer>,
    heartbeat: Option<thread::JoinHandle<()>>,
}

/// Chains calls through the node that runs the parent.
struct NodeDispatcher {
    node: Weak<NodeInner>,
}

impl NodeDispatcher {
    fn node(&self) -> Result<Arc<NodeInner>> {
        self.node
            .upgrade()
            .ok_or_else(|| Error::Transport("node stopped".into()))
    }
}

impl CallDispatcher for NodeDispatcher {
    fn chain(&self, _: &Arc<HostEnv>, parent: &CallContext, function: &str, input: Vec<u8>) -> Result<i64> {
        let node = self.node()?;
        node.submit(&FunctionId::new(&parent.user, function), input)
    }

    fn await_call(&self, user: &str, call_id: i64) -> Result<i32> {
        self.node()?.wait_user(user, call_id).map(|r| r.return_code)
    }

    fn output(&self, user: &str, call_id: i64) -> Result<Vec<u8>> {
        self.node()?.wait_user(user, call_id).map(|r| r.output)
    }
}

impl Node {
    /// Starts a node, connecting to the configured global tier or creating
    /// a private in-process one.
    pub fn start(cfg: NodeConfig) -> Result<Node> {
        let global: Arc<dyn GlobalTier> = match &cfg.global_tier {
            Some(addr) => Arc::new(RemoteGlobalTier::connect(addr.as_str())?),
            None => Arc::new(InMemoryGlobalTier::new()),
        };
        Self::start_with_global(cfg, global)
    }

    pub fn start_with_global(cfg: NodeConfig, global: Arc<dyn GlobalTier>) -> Result<Node> {
        let counting = Arc::new(CountingGlobalTier::new(global));
        let traffic = counting.traffic();
        let global: Arc<dyn GlobalTier> = counting;
        let store = Arc::new(ObjectStore::open(&cfg.object_store)?);
        let local = Arc::new(LocalTier::new(global.clone(), tier_config(&cfg, cfg.chunk_size)));
        let me = cfg.node_id.clone();
        let mut bus_err = None;
        let inner = Arc::new_cyclic(|weak: &Weak<NodeInner>| {
            let handler = {
                let weak = weak.clone();
                Arc::new(move |m: BusMessage| {
                    if let Some(n) = weak.upgrade() {
                        n.on_message(m);
                    }
                })
            };
            let bus = match Bus::bind(&me, cfg.bus_addr.as_str(), handler) {
                Ok(b) => b,
                Err(e) => {
                    bus_err = Some(e);
                    Bus::bind(&me, "127.0.0.1:0", Arc::new(|_| {})).expect("loopback bind")
                }
            };
            let env = Arc::new(
                HostEnv::new(local.clone(), Arc::new(NodeDispatcher { node: weak.clone() }))
                    .with_files(store.clone())
                    .with_net(cfg.net.clone())
                    .with_egress(cfg.egress),
            );
            NodeInner {
                scheduler: Scheduler::new(me.clone(), cfg.capacity, global.clone()),
                pool: Pool::new(cfg.capacity),
                me: me.clone(),
                global,
                traffic,
                local,
                env,
                store,
                calls: CallTable::default(),
                bus,
                functions: RwLock::default(),
                meter: BillingMeter::default(),
                shares_out: AtomicUsize::new(0),
                trace: Mutex::default(),
                stop: AtomicBool::new(false),
                stop_cv: (Mutex::new(()), Condvar::new()),
                cfg: cfg.clone(),
            }
        });
        if let Some(e) = bus_err {
            return Err(e);
        }
        for p in &cfg.peers {
            inner.bus.add_peer(&p.node_id, &p.bus_addr);
        }
        let http = http::HttpServer::bind(&cfg.http_addr, Arc::downgrade(&inner))?;
        let heartbeat = {
            let weak = Arc::downgrade(&inner);
            let every = cfg.heartbeat();
            thread::Builder::new()
                .name(format!("heartbeat-{}", cfg.node_id))
                .spawn(move || heartbeat_loop(weak, every))?
        };
        log::info!(
            "node {} up: http {} bus {}",
            cfg.node_id,
            http.local_addr(),
            inner.bus.local_addr()
        );
        Ok(Node {
            inner,
            http: Some(http),
            heartbeat: Some(heartbeat),
        })
    }

    pub fn node_id(&self) -> &str {
        &self.inner.me
    }

    pub fn config(&self) -> &NodeConfig {
        &self.inner.cfg
    }

    pub fn http_addr(&self) -> std::net::SocketAddr {
        self.http.as_ref().expect("running").local_addr()
    }

    pub fn bus_addr(&self) -> std::net::SocketAddr {
        self.inner.bus.local_addr()
    }

    pub fn add_peer(&self, id: &str, bus_addr: &str) {
        self.inner.bus.add_peer(id, bus_addr);
    }

    /// When a heartbeat from `peer` last arrived.
    pub fn peer_last_seen(&self, peer: &str) -> Option<std::time::Instant> {
        self.inner.bus.last_seen(peer)
    }

    /// The node's view of the global tier, with its traffic counted.
    pub fn global(&self) -> &Arc<dyn GlobalTier> {
        &self.inner.global
    }

    pub fn traffic(&self) -> &Arc<Traffic> {
        &self.inner.traffic
    }

    pub fn local_tier(&self) -> &Arc<LocalTier> {
        &self.inner.local
    }

    pub fn env(&self) -> &Arc<HostEnv> {
        &self.inner.env
    }

    pub fn store(&self) -> &Arc<ObjectStore> {
        &self.inner.store
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.inner.scheduler
    }

    pub fn meter(&self) -> &BillingMeter {
        &self.inner.meter
    }

    pub fn pool_view(&self, id: &FunctionId) -> LocalView {
        self.inner.pool.view(id)
    }

    /// Scheduling decisions taken on this node, oldest first.
    pub fn trace(&self) -> Vec<TraceEntry> {
        self.inner.trace.lock().clone()
    }

    /// Compiles, initialises and publishes a function. Returns its version.
    pub fn upload(&self, user: &str, name: &str, module: &[u8]) -> Result<u32> {
        self.inner.upload(&FunctionId::new(user, name), module)
    }

    /// Starts a call and returns its id at once.
    pub fn invoke_async(&self, user: &str, name: &str, input: Vec<u8>) -> Result<i64> {
        self.inner.submit(&FunctionId::new(user, name), input)
    }

    /// Runs a call and waits for it, up to the configured timeout.
    pub fn invoke(&self, user: &str, name: &str, input: Vec<u8>) -> Result<CallRecord> {
        let id = self.invoke_async(user, name, input)?;
        self.wait(id, Some(self.inner.cfg.invoke_timeout()))
    }

    /// Waits for a call; a timeout yields the still-pending record.
    pub fn wait(&self, call_id: i64, timeout: Option<Duration>) -> Result<CallRecord> {
        self.inner.wait(call_id, timeout)
    }

    pub fn status(&self, call_id: i64) -> Option<CallRecord> {
        self.inner.status(call_id)
    }

    pub fn shutdown(&mut self) {
        {
            let _g = self.inner.stop_cv.0.lock();
            self.inner.stop.store(true, Ordering::SeqCst);
        }
        self.inner.stop_cv.1.notify_all();
        if let Some(mut h) = self.http.take() {
            h.shutdown();
        }
        if let Some(h) = self.heartbeat.take() {
            let _ = h.join();
        }
        self.inner.bus.shutdown();
    }

    /// Blocks until the node is shut down from another thread.
    pub fn wait_for_shutdown(&self) {
        let mut g = self.inner.stop_cv.0.lock();
        while !self.inner.stop.load(Ordering::SeqCst) {
            self.inner.stop_cv.1.wait(&mut g);
        }
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn tier_config(cfg: &NodeConfig, chunk_size: usize) -> LocalTierConfig {
    LocalTierConfig {
        chunk_size,
        lock_lease: Duration::from_millis(cfg.lock_lease_ms),
        lock_timeout: Duration::from_millis(cfg.lock_timeout_ms),
    }
}

const META_LEASE: Duration = Duration::from_secs(30);
const META_TIMEOUT: Duration = Duration::from_secs(30);

impl NodeInner {
    fn upload(&self, id: &FunctionId, module: &[u8]) -> Result<u32> {
        let def = Arc::new(validate_and_compile(id.clone(), module, self.cfg.memory_limit_pages)?);
        let module_hash = self.store.put_module(id, module)?;
        self.store.put_object(&id.user, &module_hash, &def.object_code()?)?;
        let (_, proto) = snapshot::capture_initialised(&def, &self.env)?;
        let key = function_key(id);
        let token = self.global.lock(&key, LockMode::Write, META_LEASE, META_TIMEOUT)?;
        let published = (|| -> Result<u32> {
            let version = match self.meta(id) {
                Ok(m) => m.version + 1,
                Err(Error::UnknownFunction(_)) => 1,
                Err(e) => return Err(e),
            };
            snapshot::publish(&*self.global, &proto)?;
            let meta = FunctionMeta { version, module_hash };
            self.global
                .put(&key, &serde_json::to_vec(&meta).expect("meta serialises"))?;
            Ok(version)
        })();
        self.global.unlock(&key, token)?;
        let version = published?;
        self.functions.write().insert(
            id.clone(),
            Arc::new(Deployed {
                def,
                proto: Arc::new(proto),
                version,
            }),
        );
        self.pool.retire(id, version);
        log::info!("uploaded {id} version {version}");
        Ok(version)
    }

    fn meta(&self, id: &FunctionId) -> Result<FunctionMeta> {
        match self.global.read_all(&function_key(id)) {
            Ok(b) => serde_json::from_slice(&b).map_err(|e| Error::Format(format!("{id} metadata: {e}"))),
            Err(Error::NotFound(_)) => Err(Error::UnknownFunction(id.to_string())),
            Err(e) => Err(e),
        }
    }

    /// The current deployment of `id`, fetched and compiled on first use
    /// or after a new version appears.
    fn deployed(&self, id: &FunctionId) -> Result<Arc<Deployed>> {
        let meta = self.meta(id)?;
        if let Some(d) = self.functions.read().get(id) {
            if d.version == meta.version {
                return Ok(d.clone());
            }
        }
        let def = Arc::new(self.load(id, &meta.module_hash)?);
        let proto = snapshot::fetch(&*self.global, id)?;
        // Snapshot and metadata are replaced together under the metadata
        // key's lock; a changed version means an upload raced the fetch.
        if self.meta(id)?.version != meta.version {
            return self.deployed(id);
        }
        let d = Arc::new(Deployed {
            def,
            proto: Arc::new(proto),
            version: meta.version,
        });
        let mut fns = self.functions.write();
        // Another thread may have installed a newer version meanwhile.
        match fns.get(id) {
            Some(cur) if cur.version >= d.version => Ok(cur.clone()),
            _ => {
                fns.insert(id.clone(), d.clone());
                drop(fns);
                self.pool.retire(id, d.version);
                Ok(d)
            }
        }
    }

    /// Loads the stored machine code for a module, compiling it when there
    /// is none or it was built by an incompatible engine.
    fn load(&self, id: &FunctionId, module_hash: &str) -> Result<FunctionDef> {
        let module = self.store.module_by_hash(module_hash)?;
        let limit = self.cfg.memory_limit_pages;
        if let Some(object) = self.store.object(&id.user, module_hash)? {
            // Objects are only written by `upload` from these module bytes.
            match unsafe { load_object(id.clone(), &module, &object, limit) } {
                Ok(def) => return Ok(def),
                Err(e) => log::warn!("recompiling {id}: {e}"),
            }
        }
        validate_and_compile(id.clone(), &module, limit)
    }

    fn submit(self: &Arc<Self>, id: &FunctionId, input: Vec<u8>) -> Result<i64> {
        self.meta(id)?;
        let call_id = new_call_id();
        let record = CallRecord::new(call_id, &id.user, &id.name, input, &self.me);
        self.spawn_call(record, 0)?;
        Ok(call_id)
    }

    fn spawn_call(self: &Arc<Self>, record: CallRecord, hops: u8) -> Result<()> {
        let call_id = record.call_id;
        self.calls.insert(record.clone());
        let node = self.clone();
        thread::Builder::new()
            .name(format!("call-{call_id}"))
            .spawn(move || node.dispatch(record, hops))?;
        Ok(())
    }

    fn dispatch(self: Arc<Self>, record: CallRecord, hops: u8) {
        let id = FunctionId::new(&record.user, &record.function);
        let deployed = match self.deployed(&id) {
            Ok(d) => d,
            Err(e) => return self.complete(&record, failure(&self.me, e.to_string())),
        };
        let view = self.pool.view(&id);
        let (decision, reason) = self
            .scheduler
            .on_call(&id, record.call_id, hops, view, |p| self.bus.usable(p));
        log::debug!("call {} of {id}: {decision:?} ({reason:?})", record.call_id);
        self.trace.lock().push(TraceEntry {
            call_id: record.call_id,
            function: id.clone(),
            decision: decision.clone(),
            hops,
        });
        if let Decision::Share(target) = &decision {
            if self.share(target, &record, hops + 1) {
                return;
            }
            log::warn!("sharing call {} to {target} failed; running locally", record.call_id);
        }
        self.run_local(&record, &deployed);
    }

    /// Forwards a call. False when the peer is unreachable or too many
    /// shared calls are outstanding.
    fn share(&self, to: &str, record: &CallRecord, hops: u8) -> bool {
        if self.shares_out.fetch_add(1, Ordering::SeqCst) >= self.cfg.sharing_queue {
            self.shares_out.fetch_sub(1, Ordering::SeqCst);
            return false;
        }
        let msg = BusMessage::ShareCall {
            call_id: record.call_id,
            user: record.user.clone(),
            function: record.function.clone(),
            input: record.input.to_vec(),
            hops,
            origin: record.origin_node.clone(),
        };
        match self.bus.send(to, &msg) {
            Ok(()) => true,
            Err(e) => {
                log::warn!("{e}");
                self.shares_out.fetch_sub(1, Ordering::SeqCst);
                false
            }
        }
    }

    fn run_local(&self, record: &CallRecord, d: &Arc<Deployed>) {
        let id = d.def.id.clone();
        let slot = self.pool.acquire(&id, d.version);
        self.calls.set_running(record.call_id, &self.me);
        let mut slot = slot;
        let faaslet = match slot.faaslet.take() {
            Some(f) => Ok(f),
            None => {
                if self.pool.view(&id).faaslets == 1 {
                    let _ = self.scheduler.mark_warm(&id);
                }
                snapshot::restore(&d.proto, &d.def, &self.env)
            }
        };
        let mut faaslet: Faaslet = match faaslet {
            Ok(f) => f,
            Err(e) => {
                self.pool.release(slot, None, d.version);
                return self.complete(record, failure(&self.me, format!("cold start: {e}")));
            }
        };
        let mut ctx = CallContext::new(record.call_id, &id, record.input.clone());
        if self.cfg.data_shipping {
            ctx = ctx.with_local_tier(Arc::new(LocalTier::new(
                self.global.clone(),
                tier_config(&self.cfg, usize::MAX / 2),
            )));
        }
        let inv = faaslet.invoke(ctx);
        self.meter.record(inv.peak_memory_bytes, inv.wall);
        let kept = match snapshot::reset(&mut faaslet, &d.proto) {
            Ok(()) => Some(faaslet),
            Err(e) => {
                log::warn!("discarding Faaslet after failed reset: {e}");
                None
            }
        };
        self.pool.release(slot, kept, d.version);
        let outcome = match &inv.trap {
            None => Outcome {
                status: CallStatus::Completed,
                return_code: inv.return_code,
                output: inv.output,
                executed_on: self.me.clone(),
                error: None,
            },
            Some(t) => Outcome {
                status: CallStatus::Failed,
                return_code: inv.return_code,
                output: Vec::new(),
                executed_on: self.me.clone(),
                error: Some(t.to_string()),
            },
        };
        self.complete(record, outcome);
    }

    /// Stores the result, then hands it to the origin node.
    fn complete(&self, record: &CallRecord, outcome: Outcome) {
        let mut stored = record.clone();
        stored.status = outcome.status;
        stored.return_code = outcome.return_code;
        stored.output = outcome.output.clone();
        stored.executed_on = Some(outcome.executed_on.clone());
        stored.error = outcome.error.clone();
        if let Err(e) = self.global.put(
            &result_key(record.call_id),
            &serde_json::to_vec(&stored).expect("record serialises"),
        ) {
            log::warn!("could not store result of {}: {e}", record.call_id);
        }
        if record.origin_node == self.me {
            self.calls.finish(record.call_id, outcome);
            return;
        }
        let msg = BusMessage::CallResult {
            call_id: record.call_id,
            status: outcome.status,
            return_code: outcome.return_code,
            output: outcome.output.clone(),
            executed_on: outcome.executed_on.clone(),
            error: outcome.error.clone(),
        };
        // The local copy lets this node answer status queries too.
        self.calls.finish(record.call_id, outcome);
        if let Err(e) = self.bus.send(&record.origin_node, &msg) {
            log::warn!("result of {} cannot reach {}: {e}", record.call_id, record.origin_node);
        }
    }

    fn on_message(self: &Arc<Self>, msg: BusMessage) {
        match msg {
            BusMessage::ShareCall {
                call_id,
                user,
                function,
                input,
                hops,
                origin,
            } => {
                let record = CallRecord::new(call_id, &user, &function, input, &origin);
                if let Err(e) = self.spawn_call(record.clone(), hops) {
                    self.complete(&record, failure(&self.me, e.to_string()));
                }
            }
            BusMessage::CallResult {
                call_id,
                status,
                return_code,
                output,
                executed_on,
                error,
            } => {
                self.shares_out
                    .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                    .ok();
                self.calls.finish(
                    call_id,
                    Outcome {
                        status,
                        return_code,
                        output,
                        executed_on,
                        error,
                    },
                );
            }
            BusMessage::Heartbeat { node_id, bus_addr, .. } => self.bus.seen(&node_id, &bus_addr),
        }
    }

    fn stored(&self, call_id: i64) -> Option<CallRecord> {
        let bytes = self.global.read_all(&result_key(call_id)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn status(&self, call_id: i64) -> Option<CallRecord> {
        self.calls.get(call_id).or_else(|| self.stored(call_id))
    }

    fn wait(&self, call_id: i64, timeout: Option<Duration>) -> Result<CallRecord> {
        match self.calls.wait(call_id, timeout) {
            Some(r) => Ok(r),
            None => self.stored(call_id).ok_or(Error::UnknownCall(call_id)),
        }
    }

    /// Waits for a call on behalf of a guest of `user`. Other users' calls
    /// are invisible.
    fn wait_user(&self, user: &str, call_id: i64) -> Result<CallRecord> {
        match self.status(call_id) {
            Some(r) if r.user == user => {}
            _ => return Err(Error::UnknownCall(call_id)),
        }
        self.wait(call_id, None)
    }

    fn heartbeat(&self) {
        let warm = self.pool.warm_functions();
        let msg = BusMessage::Heartbeat {
            node_id: self.me.clone(),
            bus_addr: self.bus.local_addr().to_string(),
            warm: warm.clone(),
        };
        for p in self.bus.peer_ids() {
            if let Err(e) = self.bus.send(&p, &msg) {
                log::debug!("heartbeat to {p}: {e}");
            }
        }
        for id in self.pool.evict_idle(self.cfg.warm_ttl()) {
            log::debug!("{id} went cold on {}", self.me);
        }
        // Reconcile this node's membership of every warm set it knows.
        let known: Vec<FunctionId> = self.functions.read().keys().cloned().collect();
        for id in known {
            let here = self.pool.view(&id).faaslets > 0;
            let listed = match self.scheduler.warm_sets().read(&id) {
                Ok(s) => s.contains(&self.me),
                Err(_) => continue,
            };
            let r = match (here, listed) {
                (true, false) => self.scheduler.mark_warm(&id),
                (false, true) => self.scheduler.mark_cold(&id),
                _ => Ok(()),
            };
            if let Err(e) = r {
                log::debug!("warm set of {id}: {e}");
            }
        }
        for r in self.calls.purge(self.cfg.result_ttl()) {
            if r.origin_node == self.me {
                let _ = self.global.delete(&result_key(r.call_id));
            }
        }
    }
}

fn failure(node: &str, error: String) -> Outcome {
    Outcome {
        status: CallStatus::Failed,
        return_code: -1,
        output: Vec::new(),
        executed_on: node.to_string(),
        error: Some(error),
    }
}

fn heartbeat_loop(node: Weak<NodeInner>, every: Duration) {
    loop {
        let Some(n) = node.upgrade() else { return };
        if n.stop.load(Ordering::SeqCst) {
            return;
        }
        n.heartbeat();
        let mut g = n.stop_cv.0.lock();
        if !n.stop.load(Ordering::SeqCst) {
            n.stop_cv.1.wait_for(&mut g, every);
        }
    }
}

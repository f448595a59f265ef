//! The host interface bound into every guest.
//!
//! Calls and state live in the `faasm` import namespace; files, clock and
//! randomness use `wasi_snapshot_preview1` names and signatures so that
//! standard toolchains link against them unmodified.

mod dispatch;
mod faasm;
mod fs;
mod net;
mod wasi;

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use wasmtime::{Caller, Linker, Memory, Trap};

use crate::error::{Error, Result};
use crate::sandbox::{engine, FaasletData, FunctionId};
use crate::state::{Held, InMemoryGlobalTier, LocalTier, LocalTierConfig, LockMode, LockToken, StateKey, StateValue};

pub use dispatch::{CallDispatcher, InlineDispatcher, NoChaining};
pub use fs::{normalise_path, FileSource, MemFiles, Overlay};
pub use net::{AllowRule, EgressLimit, NetPolicy, TokenBucket};

use fs::FdTable;

/// Import namespace of the call and state functions.
pub const FAASM_NAMESPACE: &str = "faasm";
/// Import namespace of the file, clock and randomness functions.
pub const WASI_NAMESPACE: &str = "wasi_snapshot_preview1";

/// Node-wide services shared by every Faaslet.
pub struct HostEnv {
    pub local: Arc<LocalTier>,
    pub dispatcher: Arc<dyn CallDispatcher>,
    pub files: Arc<dyn FileSource>,
    pub overlay: Arc<Overlay>,
    pub net: NetPolicy,
    pub egress: EgressLimit,
}

impl HostEnv {
    pub fn new(local: Arc<LocalTier>, dispatcher: Arc<dyn CallDispatcher>) -> HostEnv {
        HostEnv {
            local,
            dispatcher,
            files: Arc::new(MemFiles::default()),
            overlay: Arc::new(Overlay::default()),
            net: NetPolicy::default(),
            egress: EgressLimit::default(),
        }
    }

    /// An environment with a private in-memory global tier and no chaining.
    pub fn standalone() -> Arc<HostEnv> {
        let global = Arc::new(InMemoryGlobalTier::new());
        let local = Arc::new(LocalTier::new(global, LocalTierConfig::default()));
        Arc::new(HostEnv::new(local, Arc::new(NoChaining)))
    }

    pub fn with_files(mut self, files: Arc<dyn FileSource>) -> Self {
        self.files = files;
        self
    }

    pub fn with_net(mut self, net: NetPolicy) -> Self {
        self.net = net;
        self
    }

    pub fn with_egress(mut self, egress: EgressLimit) -> Self {
        self.egress = egress;
        self
    }
}

/// One invocation as seen by the host interface.
#[derive(Debug, Clone, Default)]
pub struct CallContext {
    pub call_id: i64,
    pub user: String,
    pub function: String,
    pub input: Arc<[u8]>,
    /// Written at most once.
    pub output: Option<Vec<u8>>,
    /// Children created by this call.
    pub chained: Vec<i64>,
    /// Replaces the node's local tier for this call.
    pub local: Option<Arc<LocalTier>>,
}

/// A fresh random call id. Ids are positive and fit in 62 bits.
pub fn new_call_id() -> i64 {
    let mut b = [0u8; 8];
    getrandom::fill(&mut b).expect("entropy source");
    let id = (u64::from_le_bytes(b) >> 2) as i64;
    id.max(1)
}

impl CallContext {
    pub fn new(call_id: i64, id: &FunctionId, input: impl Into<Arc<[u8]>>) -> Self {
        CallContext {
            call_id,
            user: id.user.clone(),
            function: id.name.clone(),
            input: input.into(),
            ..Default::default()
        }
    }

    pub fn standalone(id: &FunctionId, input: Vec<u8>) -> Self {
        Self::new(new_call_id(), id, input)
    }

    pub(crate) fn init(id: &FunctionId) -> Self {
        Self::new(0, id, Vec::new())
    }

    pub fn with_local_tier(mut self, local: Arc<LocalTier>) -> Self {
        self.local = Some(local);
        self
    }

    pub fn function_id(&self) -> FunctionId {
        FunctionId::new(&self.user, &self.function)
    }
}

/// Per-Faaslet host state.
pub struct HostState {
    env: Arc<HostEnv>,
    call: Option<CallContext>,
    /// Guest byte offset of each key's mapped region.
    regions: HashMap<StateKey, (Arc<StateValue>, usize)>,
    local_locks: HashMap<StateKey, (Arc<StateValue>, Held)>,
    global_locks: HashMap<StateKey, (LockMode, LockToken)>,
    fds: FdTable,
    call_start: Instant,
    bucket: TokenBucket,
}

impl HostState {
    pub(crate) fn new(env: Arc<HostEnv>) -> HostState {
        let bucket = TokenBucket::new(env.egress.rate_bytes_per_s, env.egress.burst_bytes);
        HostState {
            env,
            call: None,
            regions: HashMap::new(),
            local_locks: HashMap::new(),
            global_locks: HashMap::new(),
            fds: FdTable::default(),
            call_start: Instant::now(),
            bucket,
        }
    }

    pub fn env(&self) -> &Arc<HostEnv> {
        &self.env
    }

    pub(crate) fn begin_call(&mut self, ctx: CallContext) {
        self.call = Some(ctx);
        self.call_start = Instant::now();
    }

    /// Ends the current call, releasing every lock and descriptor it left
    /// open.
    pub(crate) fn end_call(&mut self) -> CallContext {
        for (_, (value, held)) in self.local_locks.drain() {
            // SAFETY: the entry records a lock this Faaslet acquired.
            unsafe {
                match held {
                    Held::Read => value.unlock_read(),
                    Held::Write => value.unlock_write(),
                    Held::None => {}
                }
            }
        }
        let tier = self.tier();
        for (key, (_, token)) in self.global_locks.drain() {
            if let Err(e) = tier.unlock_global(&key, token) {
                log::debug!("releasing global lock on {key}: {e}");
            }
        }
        self.fds.close_all();
        self.call.take().unwrap_or_default()
    }

    pub(crate) fn call(&self) -> Option<&CallContext> {
        self.call.as_ref()
    }

    pub(crate) fn tier(&self) -> Arc<LocalTier> {
        self.call
            .as_ref()
            .and_then(|c| c.local.clone())
            .unwrap_or_else(|| self.env.local.clone())
    }

    pub(crate) fn user(&self) -> &str {
        self.call.as_ref().map_or("", |c| c.user.as_str())
    }

    pub(crate) fn key(&self, name: &str) -> Result<StateKey> {
        StateKey::new(self.user(), name)
    }

    pub(crate) fn held(&self, key: &StateKey) -> Held {
        self.local_locks.get(key).map_or(Held::None, |(_, h)| *h)
    }

    /// Records a region mapped outside the host interface (on restore).
    pub(crate) fn note_region(&mut self, value: Arc<StateValue>, offset: usize) {
        self.regions.insert(value.key().clone(), (value, offset));
    }
}

/// Whether `module.name` is a function of the host interface.
pub fn is_host_import(module: &str, name: &str) -> bool {
    match module {
        FAASM_NAMESPACE => faasm::NAMES.contains(&name),
        WASI_NAMESPACE => wasi::NAMES.contains(&name),
        _ => false,
    }
}

/// The linker holding every host function, built once per process.
pub(crate) fn linker() -> &'static Linker<FaasletData> {
    static LINKER: OnceLock<Linker<FaasletData>> = OnceLock::new();
    LINKER.get_or_init(|| {
        let mut linker = Linker::new(engine());
        faasm::add_to_linker(&mut linker).expect("faasm imports");
        wasi::add_to_linker(&mut linker).expect("wasi imports");
        linker
    })
}

type Ctx<'a> = Caller<'a, FaasletData>;

fn oob() -> wasmtime::Error {
    wasmtime::Error::from(Trap::MemoryOutOfBounds)
}

fn memory(caller: &Ctx<'_>) -> wasmtime::Result<Memory> {
    caller.data().memory.ok_or_else(oob)
}

fn range(ptr: i32, len: i32) -> wasmtime::Result<std::ops::Range<usize>> {
    let (p, l) = (ptr as u32 as usize, len as u32 as usize);
    Ok(p..p.checked_add(l).ok_or_else(oob)?)
}

/// Copies guest bytes out; out-of-range pointers trap.
fn read_guest(caller: &Ctx<'_>, ptr: i32, len: i32) -> wasmtime::Result<Vec<u8>> {
    if len == 0 {
        return Ok(Vec::new());
    }
    let mem = memory(caller)?;
    mem.data(caller)
        .get(range(ptr, len)?)
        .map(<[u8]>::to_vec)
        .ok_or_else(oob)
}

fn read_str(caller: &Ctx<'_>, ptr: i32, len: i32) -> wasmtime::Result<Option<String>> {
    Ok(String::from_utf8(read_guest(caller, ptr, len)?).ok())
}

fn write_guest(caller: &mut Ctx<'_>, ptr: i32, bytes: &[u8]) -> wasmtime::Result<()> {
    if bytes.is_empty() {
        return Ok(());
    }
    let mem = memory(caller)?;
    let r = range(ptr, bytes.len() as i32)?;
    mem.data_mut(caller).get_mut(r).ok_or_else(oob)?.copy_from_slice(bytes);
    Ok(())
}

fn write_u32(caller: &mut Ctx<'_>, ptr: i32, v: u32) -> wasmtime::Result<()> {
    write_guest(caller, ptr, &v.to_le_bytes())
}

fn write_u64(caller: &mut Ctx<'_>, ptr: i32, v: u64) -> wasmtime::Result<()> {
    write_guest(caller, ptr, &v.to_le_bytes())
}

/// Negated error code, as guests expect.
fn neg(e: &Error) -> i32 {
    -e.errno().code()
}

fn status(r: Result<()>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(e) => {
            log::debug!("host call failed: {e}");
            neg(&e)
        }
    }
}

fn value64(r: Result<i64>) -> i64 {
    match r {
        Ok(v) => v,
        Err(e) => {
            log::debug!("host call failed: {e}");
            neg(&e) as i64
        }
    }
}

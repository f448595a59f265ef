use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use wasmtime::{AsContextMut, Global, Instance, Memory, ResourceLimiter, Store, TypedFunc, Val};

use super::compile::FunctionDef;
use super::engine;
use super::memory::{self, MemHandle, MemoryLayout};
use super::trap::{ProcExit, TrapInfo, TrapKind};
use crate::error::{Error, Result};
use crate::host::{CallContext, HostEnv, HostState};
use crate::shm::WASM_PAGE;
use crate::state::StateValue;

/// Per-store data: the Faaslet's memory bookkeeping and host-interface state.
pub struct FaasletData {
    pub(crate) limit_bytes: usize,
    pub(crate) grow_refused: bool,
    pub(crate) memory: Option<Memory>,
    pub(crate) mem: Option<MemHandle>,
    pub host: HostState,
}

impl ResourceLimiter for FaasletData {
    fn memory_growing(&mut self, _current: usize, desired: usize, _maximum: Option<usize>) -> wasmtime::Result<bool> {
        if desired > self.limit_bytes {
            self.grow_refused = true;
            return Ok(false);
        }
        Ok(true)
    }

    fn table_growing(&mut self, _current: usize, desired: usize, _maximum: Option<usize>) -> wasmtime::Result<bool> {
        Ok(desired <= 1 << 20)
    }
}

/// Outcome of one call.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub return_code: i32,
    pub output: Vec<u8>,
    pub trap: Option<TrapInfo>,
    pub cpu_ns: u64,
    pub wall: Duration,
    /// Linear memory size when the call finished; memory never shrinks, so
    /// this is the call's peak.
    pub peak_memory_bytes: usize,
    pub chained: Vec<i64>,
}

impl Invocation {
    pub fn ok(&self) -> bool {
        self.trap.is_none()
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Treats `proc_exit` as a normal return.
fn exit_code(r: wasmtime::Result<i32>) -> wasmtime::Result<i32> {
    match r {
        Err(e) => match e.downcast_ref::<ProcExit>() {
            Some(p) => Ok(p.0),
            None => Err(e),
        },
        ok => ok,
    }
}

fn thread_cpu_ns() -> u64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

/// One sandboxed instance of a function.
pub struct Faaslet {
    id: u64,
    def: Arc<FunctionDef>,
    pub(crate) store: Store<FaasletData>,
    instance: Instance,
    main: TypedFunc<(), i32>,
    init: Option<TypedFunc<(), i32>>,
    pub(crate) globals: Vec<(u32, Global)>,
    cpu_ns: u64,
    warm: bool,
    busy: bool,
}

impl std::fmt::Debug for Faaslet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Faaslet")
            .field("id", &self.id)
            .field("function", &self.def.id)
            .field("warm", &self.warm)
            .finish()
    }
}

impl Faaslet {
    /// A fresh instance with memory at the declared minimum. Init code is not
    /// run.
    pub fn instantiate(def: &Arc<FunctionDef>, env: &Arc<HostEnv>) -> Result<Faaslet> {
        let limit_bytes = def.memory_limit_pages * WASM_PAGE;
        let data = FaasletData {
            limit_bytes,
            grow_refused: false,
            memory: None,
            mem: None,
            host: HostState::new(env.clone()),
        };
        let mut store = Store::new(engine(), data);
        store.limiter(|d| d);
        memory::set_next_limit(limit_bytes);
        let instance = def.pre.instantiate(&mut store);
        let mem = memory::take_created();
        let instance = instance.map_err(|e| Error::Instantiation(format!("{e:#}")))?;
        let memory = instance.exports(&mut store).find_map(|e| e.into_memory());
        store.data_mut().memory = memory;
        store.data_mut().mem = mem;
        let main = instance
            .get_typed_func::<(), i32>(&mut store, &def.main_entry)
            .map_err(|e| Error::Instantiation(format!("{e:#}")))?;
        let init = match &def.init_entry {
            Some(name) => Some(
                instance
                    .get_typed_func::<(), i32>(&mut store, name)
                    .map_err(|e| Error::Instantiation(format!("{e:#}")))?,
            ),
            None => None,
        };
        let globals = def
            .global_exports
            .iter()
            .map(|(idx, name)| {
                instance
                    .get_global(&mut store, name)
                    .map(|g| (*idx, g))
                    .ok_or_else(|| Error::Instantiation(format!("missing global export {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Faaslet {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            def: def.clone(),
            store,
            instance,
            main,
            init,
            globals,
            cpu_ns: 0,
            warm: false,
            busy: false,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub(crate) fn set_id(&mut self, id: u64) {
        self.id = id;
    }

    pub fn def(&self) -> &Arc<FunctionDef> {
        &self.def
    }

    pub fn env(&self) -> &Arc<HostEnv> {
        self.store.data().host.env()
    }

    pub fn instance(&self) -> &Instance {
        &self.instance
    }

    pub fn cpu_ns_used(&self) -> u64 {
        self.cpu_ns
    }

    pub fn is_warm(&self) -> bool {
        self.warm
    }

    pub fn set_warm(&mut self, warm: bool) {
        self.warm = warm;
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }

    pub(crate) fn mem_handle(&self) -> Option<&MemHandle> {
        self.store.data().mem.as_ref()
    }

    /// Runs the init entry, if the module has one. A non-zero return code is
    /// an error.
    pub fn run_init(&mut self) -> Result<()> {
        let Some(init) = self.init.clone() else { return Ok(()) };
        self.busy = true;
        self.store.data_mut().grow_refused = false;
        self.store.data_mut().host.begin_call(CallContext::init(&self.def.id));
        let res = exit_code(init.call(&mut self.store, ()));
        self.store.data_mut().host.end_call();
        self.busy = false;
        match res {
            Ok(0) => Ok(()),
            Ok(code) => Err(Error::Instantiation(format!("init returned {code}"))),
            Err(e) => Err(Error::Trap(TrapInfo::classify(&e, self.store.data().grow_refused))),
        }
    }

    /// Runs the main entry for one call.
    pub fn invoke(&mut self, ctx: CallContext) -> Invocation {
        self.busy = true;
        self.store.data_mut().grow_refused = false;
        self.store.data_mut().host.begin_call(ctx);
        let (cpu0, t0) = (thread_cpu_ns(), Instant::now());
        let res = exit_code(self.main.call(&mut self.store, ()));
        let (cpu, wall) = (thread_cpu_ns() - cpu0, t0.elapsed());
        let ctx = self.store.data_mut().host.end_call();
        self.busy = false;
        self.cpu_ns += cpu;
        let peak_memory_bytes = self.memory_bytes();
        match res {
            Ok(code) => Invocation {
                return_code: code,
                output: ctx.output.unwrap_or_default(),
                trap: None,
                cpu_ns: cpu,
                wall,
                peak_memory_bytes,
                chained: ctx.chained,
            },
            Err(e) => Invocation {
                return_code: -1,
                output: Vec::new(),
                trap: Some(TrapInfo::classify(&e, self.store.data().grow_refused)),
                cpu_ns: cpu,
                wall,
                peak_memory_bytes,
                chained: ctx.chained,
            },
        }
    }

    /// Convenience for callers outside a node: runs one call with `input`.
    pub fn invoke_input(&mut self, input: &[u8]) -> Invocation {
        let ctx = CallContext::standalone(&self.def.id, input.to_vec());
        self.invoke(ctx)
    }

    pub fn memory_bytes(&self) -> usize {
        self.mem_handle().map_or(0, |m| m.size())
    }

    pub fn memory_pages(&self) -> usize {
        self.memory_bytes() / WASM_PAGE
    }

    pub fn layout(&self) -> MemoryLayout {
        self.mem_handle().map_or(
            MemoryLayout {
                private_pages: 0,
                regions: Vec::new(),
                total_pages: 0,
            },
            |m| m.layout(),
        )
    }

    /// Extends private memory; returns the previous size in pages.
    pub fn grow_private(&mut self, delta_pages: usize) -> Result<usize> {
        grow_private(&mut self.store, delta_pages)
    }

    /// Appends a region mapping `value`'s replica; returns its guest offset.
    pub fn map_shared_region(&mut self, value: Arc<StateValue>, length_bytes: usize) -> Result<usize> {
        map_shared_region(&mut self.store, value, length_bytes)
    }

    pub fn read_memory(&mut self, off: usize, len: usize) -> Result<Vec<u8>> {
        let mem = self
            .store
            .data()
            .memory
            .ok_or_else(|| Error::Range("no memory".into()))?;
        let data = mem.data(&self.store);
        data.get(off..off.saturating_add(len))
            .map(<[u8]>::to_vec)
            .ok_or_else(|| Error::Range(format!("[{off}, +{len}) beyond memory")))
    }

    pub fn write_memory(&mut self, off: usize, bytes: &[u8]) -> Result<()> {
        let mem = self
            .store
            .data()
            .memory
            .ok_or_else(|| Error::Range("no memory".into()))?;
        let data = mem.data_mut(&mut self.store);
        data.get_mut(off..off.saturating_add(bytes.len()))
            .ok_or_else(|| Error::Range(format!("[{off}, +{}) beyond memory", bytes.len())))?
            .copy_from_slice(bytes);
        Ok(())
    }

    /// Current values of the mutable globals as raw bits.
    pub(crate) fn global_values(&mut self) -> Vec<(u32, u64)> {
        let globals = self.globals.clone();
        globals
            .into_iter()
            .map(|(idx, g)| {
                let bits = match g.get(&mut self.store) {
                    Val::I32(v) => v as u32 as u64,
                    Val::I64(v) => v as u64,
                    Val::F32(v) => v as u64,
                    Val::F64(v) => v,
                    _ => 0,
                };
                (idx, bits)
            })
            .collect()
    }

    pub(crate) fn set_global_values(&mut self, values: &[(u32, u64)]) -> Result<()> {
        for (idx, bits) in values {
            let g = self
                .globals
                .iter()
                .find(|(i, _)| i == idx)
                .map(|(_, g)| *g)
                .ok_or_else(|| Error::Format(format!("snapshot names unknown global {idx}")))?;
            let val = match g.get(&mut self.store) {
                Val::I32(_) => Val::I32(*bits as u32 as i32),
                Val::I64(_) => Val::I64(*bits as i64),
                Val::F32(_) => Val::F32(*bits as u32),
                Val::F64(_) => Val::F64(*bits),
                _ => return Err(Error::Format(format!("global {idx} has an unsupported type"))),
            };
            g.set(&mut self.store, val)
                .map_err(|e| Error::Format(format!("global {idx}: {e:#}")))?;
        }
        Ok(())
    }
}

/// Grows private memory through the engine so its bounds stay in sync.
pub(crate) fn grow_private(mut ctx: impl AsContextMut<Data = FaasletData>, delta_pages: usize) -> Result<usize> {
    let mut ctx = ctx.as_context_mut();
    let mem = ctx
        .data()
        .memory
        .ok_or_else(|| Error::Limit("function has no memory".into()))?;
    let handle = ctx.data().mem.clone().expect("memory without handle");
    handle.clear_pending();
    let old = mem
        .grow(&mut ctx, delta_pages as u64)
        .map_err(|e| Error::Limit(format!("{e:#}")))?;
    Ok(old as usize)
}

pub(crate) fn map_shared_region(
    mut ctx: impl AsContextMut<Data = FaasletData>,
    value: Arc<StateValue>,
    length_bytes: usize,
) -> Result<usize> {
    let mut ctx = ctx.as_context_mut();
    if length_bytes == 0 || length_bytes > value.len() {
        return Err(Error::Range(format!(
            "region of {length_bytes} bytes over a {}-byte value",
            value.len()
        )));
    }
    let pages = length_bytes.div_ceil(WASM_PAGE);
    let mem = ctx
        .data()
        .memory
        .ok_or_else(|| Error::Limit("function has no memory".into()))?;
    let handle = ctx.data().mem.clone().expect("memory without handle");
    handle.set_pending_shared(value.key().clone(), value);
    let res = mem.grow(&mut ctx, pages as u64);
    handle.clear_pending();
    match res {
        Ok(old_pages) => Ok(old_pages as usize * WASM_PAGE),
        Err(e) => Err(Error::Limit(format!("{e:#}"))),
    }
}

impl From<TrapKind> for TrapInfo {
    fn from(kind: TrapKind) -> Self {
        TrapInfo::new(kind, "")
    }
}

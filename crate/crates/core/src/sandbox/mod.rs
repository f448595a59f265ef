//! Loading, validating and running guest modules.

mod compile;
mod faaslet;
mod memory;
mod trap;

use std::sync::{Arc, OnceLock};

use wasmtime::{Config, Engine};

pub use compile::{load_object, validate_and_compile, FunctionDef, FunctionId, INIT_ENTRY, MAIN_ENTRY};
pub use faaslet::{Faaslet, FaasletData, Invocation};
pub use memory::{MemHandle, MemoryLayout, RegionMapping, Segment, SegmentKind};
pub use trap::{HostViolation, ProcExit, TrapInfo, TrapKind};

pub(crate) use faaslet::{grow_private, map_shared_region};
pub(crate) use trap::violation;

pub use crate::shm::WASM_PAGE as PAGE_SIZE;

/// Largest memory limit accepted, in pages (4 GiB).
pub const MAX_LIMIT_PAGES: usize = 65536;

/// The process-wide engine. Linear memories are created by this crate so
/// that shared regions can be mapped into them.
pub fn engine() -> &'static Engine {
    static ENGINE: OnceLock<Engine> = OnceLock::new();
    ENGINE.get_or_init(|| {
        let mut cfg = Config::new();
        cfg.memory_reservation(0)
            .memory_guard_size(0)
            .memory_reservation_for_growth(0)
            .guard_before_linear_memory(false)
            .memory_init_cow(false)
            .with_host_memory(Arc::new(memory::MmapMemoryCreator));
        Engine::new(&cfg).expect("engine configuration")
    })
}

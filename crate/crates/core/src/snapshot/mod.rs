//! Proto-Faaslets: execution state captured after initialisation and
//! restored, copy-on-write, into new or used Faaslets.

mod format;

use std::sync::{Arc, OnceLock};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::host::HostEnv;
use crate::sandbox::{Faaslet, FunctionDef, FunctionId, MemoryLayout, RegionMapping, Segment, SegmentKind, PAGE_SIZE};
use crate::shm::{round_to_pages, SealedImage};
use crate::state::{GlobalTier, Held, LockMode, StateKey};

pub use format::{MAGIC, VERSION};

/// Bytes per global-tier request when publishing or fetching.
pub const TRANSFER_CHUNK: usize = 1 << 20;

const PUBLISH_LEASE: Duration = Duration::from_secs(60);
const PUBLISH_TIMEOUT: Duration = Duration::from_secs(30);

/// A Faaslet's memory and mutable globals at a quiescent point.
#[derive(Debug, Clone)]
pub struct ProtoSnapshot {
    pub def_id: FunctionId,
    /// The whole linear memory; bytes under shared regions are zero.
    pub memory_image: Arc<[u8]>,
    pub memory_pages: usize,
    pub mutable_globals: Vec<(u32, u64)>,
    /// Shared regions mapped when the snapshot was taken. Restoring maps the
    /// same keys at the same offsets.
    pub regions: Vec<RegionMapping>,
    pub version: u32,
    sealed: OnceLock<Arc<SealedImage>>,
}

impl PartialEq for ProtoSnapshot {
    fn eq(&self, o: &Self) -> bool {
        self.def_id == o.def_id
            && self.memory_image == o.memory_image
            && self.memory_pages == o.memory_pages
            && self.mutable_globals == o.mutable_globals
            && self.regions == o.regions
            && self.version == o.version
    }
}

/// Global-tier key of a function's published snapshot.
pub fn snapshot_key(id: &FunctionId) -> String {
    format!("__snapshots/{}/{}", id.user, id.name)
}

impl ProtoSnapshot {
    pub fn new(
        def_id: FunctionId,
        memory_image: Vec<u8>,
        mutable_globals: Vec<(u32, u64)>,
        regions: Vec<RegionMapping>,
    ) -> Result<ProtoSnapshot> {
        if memory_image.len() % PAGE_SIZE != 0 {
            return Err(Error::Format("memory image is not a whole number of pages".into()));
        }
        Ok(ProtoSnapshot {
            def_id,
            memory_pages: memory_image.len() / PAGE_SIZE,
            memory_image: Arc::from(memory_image),
            mutable_globals,
            regions,
            version: VERSION,
            sealed: OnceLock::new(),
        })
    }

    /// The memory image as a sealed memory file, created on first use and
    /// shared by every restore from this snapshot.
    fn image(&self) -> Result<&Arc<SealedImage>> {
        if let Some(img) = self.sealed.get() {
            return Ok(img);
        }
        let img = Arc::new(SealedImage::new(&self.memory_image)?);
        Ok(self.sealed.get_or_init(|| img))
    }

    pub fn layout(&self) -> MemoryLayout {
        let region_pages: usize = self.regions.iter().map(|r| r.length_pages).sum();
        MemoryLayout {
            private_pages: self.memory_pages - region_pages,
            regions: self.regions.clone(),
            total_pages: self.memory_pages,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = Vec::new();
        format::put_str(&mut meta, &self.def_id.user);
        format::put_str(&mut meta, &self.def_id.name);
        meta.extend_from_slice(&(self.memory_pages as u64).to_le_bytes());
        let mut globals = Vec::with_capacity(4 + 12 * self.mutable_globals.len());
        globals.extend_from_slice(&(self.mutable_globals.len() as u32).to_le_bytes());
        for (idx, bits) in &self.mutable_globals {
            globals.extend_from_slice(&idx.to_le_bytes());
            globals.extend_from_slice(&bits.to_le_bytes());
        }
        let mut regions = Vec::new();
        regions.extend_from_slice(&(self.regions.len() as u32).to_le_bytes());
        for r in &self.regions {
            format::put_str(&mut regions, &r.state_key.key);
            regions.extend_from_slice(&(r.guest_offset_pages as u64).to_le_bytes());
            regions.extend_from_slice(&(r.length_pages as u64).to_le_bytes());
        }
        format::encode(&[
            (format::META, meta),
            (format::GLOBALS, globals),
            (format::REGIONS, regions),
            (format::MEMORY, self.memory_image.to_vec()),
        ])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ProtoSnapshot> {
        let sections = format::decode(bytes)?;
        let find = |kind: u32| {
            sections
                .iter()
                .find(|(k, _)| *k == kind)
                .map(|(_, b)| *b)
                .ok_or_else(|| Error::Format(format!("missing section {kind}")))
        };
        let mut r = format::Reader(find(format::META)?);
        let (user, name) = (r.str()?, r.str()?);
        let memory_pages = r.u64()? as usize;
        r.finish()?;
        let def_id = FunctionId::new(&user, &name);

        let mut r = format::Reader(find(format::GLOBALS)?);
        let n = r.u32()? as usize;
        let mutable_globals = (0..n).map(|_| Ok((r.u32()?, r.u64()?))).collect::<Result<Vec<_>>>()?;
        r.finish()?;

        let mut r = format::Reader(find(format::REGIONS)?);
        let n = r.u32()? as usize;
        let mut regions = Vec::new();
        for _ in 0..n {
            let key = r.str()?;
            let state_key = StateKey::new(&user, &key)?;
            let guest_offset_pages = r.u64()? as usize;
            let length_pages = r.u64()? as usize;
            regions.push(RegionMapping {
                state_key,
                guest_offset_pages,
                length_pages,
            });
        }
        r.finish()?;

        let memory = find(format::MEMORY)?;
        if Some(memory.len()) != memory_pages.checked_mul(PAGE_SIZE) {
            return Err(Error::Format(format!(
                "memory section is {} bytes for {memory_pages} pages",
                memory.len()
            )));
        }
        let mut end = 0;
        for reg in &regions {
            if reg.guest_offset_pages < end || reg.length_pages == 0 {
                return Err(Error::Format("regions overlap or are unordered".into()));
            }
            end = reg.guest_offset_pages + reg.length_pages;
        }
        if end > memory_pages {
            return Err(Error::Format("region beyond memory".into()));
        }
        Ok(ProtoSnapshot {
            def_id,
            memory_image: Arc::from(memory),
            memory_pages,
            mutable_globals,
            regions,
            version: VERSION,
            sealed: OnceLock::new(),
        })
    }
}

/// Captures `f`'s memory and mutable globals. `f` is left unchanged.
pub fn capture(f: &mut Faaslet) -> Result<ProtoSnapshot> {
    if f.is_busy() {
        return Err(Error::Busy(format!("faaslet {} is mid-call", f.id())));
    }
    let (memory_image, memory_pages, regions) = match f.mem_handle() {
        Some(m) => {
            let core = m.lock();
            (core.private_image(), core.size() / PAGE_SIZE, core.layout().regions)
        }
        None => (Vec::new(), 0, Vec::new()),
    };
    Ok(ProtoSnapshot {
        def_id: f.def().id.clone(),
        memory_image: Arc::from(memory_image),
        memory_pages,
        mutable_globals: f.global_values(),
        regions,
        version: VERSION,
        sealed: OnceLock::new(),
    })
}

/// Instantiates and initialises a Faaslet, then captures it.
pub fn capture_initialised(def: &Arc<FunctionDef>, env: &Arc<HostEnv>) -> Result<(Faaslet, ProtoSnapshot)> {
    let mut f = Faaslet::instantiate(def, env)?;
    f.run_init()?;
    let s = capture(&mut f)?;
    Ok((f, s))
}

/// The segment list of a snapshot, resolving shared regions against the
/// environment's local tier.
fn segments(s: &ProtoSnapshot, env: &HostEnv) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    let mut at = 0;
    for r in &s.regions {
        if r.guest_offset_pages > at {
            out.push(Segment {
                start_page: at,
                pages: r.guest_offset_pages - at,
                kind: SegmentKind::Private,
            });
        }
        let value = env.local.replica(&r.state_key, 0, 0)?;
        if round_to_pages(value.len()) != r.length_pages * PAGE_SIZE {
            return Err(Error::Format(format!(
                "region {} is {} pages, replica has {} bytes",
                r.state_key,
                r.length_pages,
                value.len()
            )));
        }
        env.local.ensure(&value, 0, value.len(), Held::None)?;
        out.push(Segment {
            start_page: r.guest_offset_pages,
            pages: r.length_pages,
            kind: SegmentKind::Shared {
                key: r.state_key.clone(),
                value,
            },
        });
        at = r.guest_offset_pages + r.length_pages;
    }
    if s.memory_pages > at {
        out.push(Segment {
            start_page: at,
            pages: s.memory_pages - at,
            kind: SegmentKind::Private,
        });
    }
    Ok(out)
}

fn check_def(s: &ProtoSnapshot, def: &FunctionDef) -> Result<()> {
    if s.version != VERSION {
        return Err(Error::Format(format!("version {}, expected {VERSION}", s.version)));
    }
    if s.def_id != def.id {
        return Err(Error::Invalid(format!("snapshot of {} used for {}", s.def_id, def.id)));
    }
    if s.memory_pages > def.memory_limit_pages {
        return Err(Error::Limit(format!(
            "snapshot has {} pages, limit is {}",
            s.memory_pages, def.memory_limit_pages
        )));
    }
    Ok(())
}

/// A new Faaslet whose memory and globals equal the snapshot. Private pages
/// are mapped copy-on-write from the snapshot image.
pub fn restore(s: &ProtoSnapshot, def: &Arc<FunctionDef>, env: &Arc<HostEnv>) -> Result<Faaslet> {
    check_def(s, def)?;
    let mut f = Faaslet::instantiate(def, env)?;
    let current = f.memory_pages();
    if s.memory_pages < current {
        return Err(Error::Format(format!(
            "snapshot has {} pages, module minimum is {current}",
            s.memory_pages
        )));
    }
    if let Some(handle) = f.mem_handle().cloned() {
        f.grow_private(s.memory_pages - current)?;
        let segs = segments(s, env)?;
        let shared: Vec<_> = segs
            .iter()
            .filter_map(|seg| match &seg.kind {
                SegmentKind::Shared { value, .. } => Some((value.clone(), seg.start_page * PAGE_SIZE)),
                SegmentKind::Private => None,
            })
            .collect();
        handle.lock().install(s.image()?, segs)?;
        for (value, off) in shared {
            f.store.data_mut().host.note_region(value, off);
        }
    }
    f.set_global_values(&s.mutable_globals)?;
    f.set_warm(true);
    Ok(f)
}

/// Returns `f` to the snapshot state. Private pages written since are
/// discarded; if the memory layout changed, the Faaslet is rebuilt from the
/// snapshot and keeps its id.
pub fn reset(f: &mut Faaslet, s: &ProtoSnapshot) -> Result<()> {
    if f.is_busy() {
        return Err(Error::Busy(format!("faaslet {} is mid-call", f.id())));
    }
    check_def(s, f.def())?;
    if f.layout() == s.layout() {
        if let Some(handle) = f.mem_handle().cloned() {
            handle.lock().reset_private(s.image()?)?;
        }
        f.set_global_values(&s.mutable_globals)?;
        return Ok(());
    }
    let (id, def, env) = (f.id(), f.def().clone(), f.env().clone());
    *f = restore(s, &def, &env)?;
    f.set_id(id);
    Ok(())
}

/// Stores the snapshot in the global tier under [`snapshot_key`], in
/// [`TRANSFER_CHUNK`]-sized writes.
pub fn publish(global: &dyn GlobalTier, s: &ProtoSnapshot) -> Result<()> {
    let key = snapshot_key(&s.def_id);
    let bytes = s.to_bytes();
    let token = global.lock(&key, LockMode::Write, PUBLISH_LEASE, PUBLISH_TIMEOUT)?;
    let res = (|| -> Result<_> {
        let mut chunks = bytes.chunks(TRANSFER_CHUNK);
        global.put(&key, chunks.next().unwrap_or(&[]))?;
        let mut off = TRANSFER_CHUNK;
        for c in chunks {
            global.write(&key, off as u64, c)?;
            off += c.len();
        }
        Ok(())
    })();
    global.unlock(&key, token)?;
    res
}

/// Loads a published snapshot.
pub fn fetch(global: &dyn GlobalTier, id: &FunctionId) -> Result<ProtoSnapshot> {
    let key = snapshot_key(id);
    let token = global.lock(&key, LockMode::Read, PUBLISH_LEASE, PUBLISH_TIMEOUT)?;
    let res = (|| -> Result<_> {
        let size = global
            .size(&key)?
            .ok_or_else(|| Error::NotFound(format!("no snapshot for {id}")))? as usize;
        let mut bytes = Vec::with_capacity(size);
        while bytes.len() < size {
            let n = TRANSFER_CHUNK.min(size - bytes.len());
            bytes.extend_from_slice(&global.read(&key, bytes.len() as u64, n as u64)?);
        }
        Ok(bytes)
    })();
    global.unlock(&key, token)?;
    ProtoSnapshot::from_bytes(&res?)
}

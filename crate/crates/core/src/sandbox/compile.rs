use std::fmt;
use std::sync::Arc;

use wasm_encoder::{ExportKind, ExportSection, RawSection};
use wasmparser::{ExternalKind, Parser, Payload, TypeRef, Validator};
use wasmtime::{ExternType, InstancePre, Module, ValType};

use super::engine;
use super::faaslet::FaasletData;
use crate::error::{Error, Result};
use crate::shm::WASM_PAGE;

pub const MAIN_ENTRY: &str = "_faasm_main";
pub const INIT_ENTRY: &str = "_faasm_init";
pub(crate) const GLOBAL_EXPORT_PREFIX: &str = "__faaslite_g";
pub(crate) const MEMORY_EXPORT: &str = "__faaslite_memory";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FunctionId {
    pub user: String,
    pub name: String,
}

impl FunctionId {
    pub fn new(user: &str, name: &str) -> Self {
        FunctionId {
            user: user.to_string(),
            name: name.to_string(),
        }
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.user, self.name)
    }
}

/// A validated, compiled guest module.
pub struct FunctionDef {
    pub id: FunctionId,
    pub module_bytes: Arc<[u8]>,
    pub memory_limit_pages: usize,
    /// Declared minimum memory; 0 for modules without a memory.
    pub declared_min_pages: usize,
    pub has_memory: bool,
    pub init_entry: Option<String>,
    pub main_entry: String,
    pub(crate) pre: InstancePre<FaasletData>,
    /// `(global index, export name)` of every mutable defined global.
    pub(crate) global_exports: Vec<(u32, String)>,
}

impl fmt::Debug for FunctionDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FunctionDef")
            .field("id", &self.id)
            .field("memory_limit_pages", &self.memory_limit_pages)
            .field("declared_min_pages", &self.declared_min_pages)
            .field("init_entry", &self.init_entry)
            .finish()
    }
}

impl FunctionDef {
    pub fn module(&self) -> &Module {
        self.pre.module()
    }

    /// Machine code for this module, loadable with [`load_object`].
    pub fn object_code(&self) -> Result<Vec<u8>> {
        self.module()
            .serialize()
            .map_err(|e| Error::Validation(format!("{e:#}")))
    }

    pub fn mutable_globals(&self) -> impl Iterator<Item = u32> + '_ {
        self.global_exports.iter().map(|(i, _)| *i)
    }
}

struct ModuleInfo {
    memory_min_pages: Option<u64>,
    mutable_globals: Vec<u32>,
    memory_exported: bool,
}

/// Scans the module and re-emits it with extra exports for the memory (if
/// not already exported) and every mutable defined global, so snapshots can
/// reach state that the module keeps private.
fn add_state_exports(bytes: &[u8]) -> Result<(Vec<u8>, ModuleInfo)> {
    let bad = |e: wasmparser::BinaryReaderError| Error::Validation(e.to_string());
    let mut imported_globals = 0u32;
    let mut info = ModuleInfo {
        memory_min_pages: None,
        mutable_globals: Vec::new(),
        memory_exported: false,
    };
    let mut sections: Vec<(u8, std::ops::Range<usize>)> = Vec::new();
    let mut exports: Vec<(String, ExportKind, u32)> = Vec::new();
    let mut export_at: Option<usize> = None;

    for payload in Parser::new(0).parse_all(bytes) {
        let payload = payload.map_err(bad)?;
        match &payload {
            Payload::ImportSection(r) => {
                for imp in r.clone().into_imports() {
                    match imp.map_err(bad)?.ty {
                        TypeRef::Global(_) => imported_globals += 1,
                        TypeRef::Memory(_) => {
                            return Err(Error::Link("imported memories are not supported".into()));
                        }
                        _ => {}
                    }
                }
            }
            Payload::MemorySection(r) => {
                for m in r.clone() {
                    let m = m.map_err(bad)?;
                    if m.memory64 || m.shared {
                        return Err(Error::Validation("only 32-bit unshared memories are supported".into()));
                    }
                    info.memory_min_pages.get_or_insert(m.initial);
                }
            }
            Payload::GlobalSection(r) => {
                for (i, g) in r.clone().into_iter().enumerate() {
                    if g.map_err(bad)?.ty.mutable {
                        info.mutable_globals.push(imported_globals + i as u32);
                    }
                }
            }
            Payload::ExportSection(r) => {
                for e in r.clone() {
                    let e = e.map_err(bad)?;
                    let kind = match e.kind {
                        ExternalKind::Func => ExportKind::Func,
                        ExternalKind::Table => ExportKind::Table,
                        ExternalKind::Memory => {
                            info.memory_exported = true;
                            ExportKind::Memory
                        }
                        ExternalKind::Global => ExportKind::Global,
                        ExternalKind::Tag => ExportKind::Tag,
                        // Not supported by the engine configuration; keep the
                        // byte so validation reports it later.
                        _ => return Err(Error::Validation("unsupported export kind".into())),
                    };
                    exports.push((e.name.to_string(), kind, e.index));
                }
            }
            _ => {}
        }
        if let Some((id, range)) = payload.as_section() {
            let range = range.start as usize..range.end as usize;
            if matches!(payload, Payload::ExportSection(_)) {
                export_at = Some(sections.len());
            } else if export_at.is_none() && matches!(id, 8 | 9 | 10 | 11 | 12) {
                // The export section must precede start/element/code/data.
                export_at = Some(sections.len());
                sections.push((7, 0..0));
            }
            if id != 7 {
                sections.push((id, range));
            } else {
                sections.push((7, 0..0));
            }
        }
    }
    if export_at.is_none() {
        export_at = Some(sections.len());
        sections.push((7, 0..0));
    }

    for idx in &info.mutable_globals {
        exports.push((format!("{GLOBAL_EXPORT_PREFIX}{idx}"), ExportKind::Global, *idx));
    }
    if info.memory_min_pages.is_some() && !info.memory_exported {
        exports.push((MEMORY_EXPORT.to_string(), ExportKind::Memory, 0));
    }
    let mut export_section = ExportSection::new();
    for (name, kind, idx) in &exports {
        export_section.export(name, *kind, *idx);
    }

    let mut module = wasm_encoder::Module::new();
    for (i, (id, range)) in sections.iter().enumerate() {
        if Some(i) == export_at {
            module.section(&export_section);
        } else if *id != 7 {
            module.section(&RawSection {
                id: *id,
                data: &bytes[range.clone()],
            });
        }
    }
    Ok((module.finish(), info))
}

fn is_entry(module: &Module, name: &str) -> Result<bool> {
    match module.get_export(name) {
        None => Ok(false),
        Some(ExternType::Func(f)) => {
            let ok =
                f.params().len() == 0 && f.results().len() == 1 && matches!(f.results().next(), Some(ValType::I32));
            if ok {
                Ok(true)
            } else {
                Err(Error::Link(format!("{name} must take no arguments and return i32")))
            }
        }
        Some(_) => Err(Error::Link(format!("{name} is not a function"))),
    }
}

/// Validates `module_bytes`, checks its imports against the host interface and
/// compiles it.
pub fn validate_and_compile(id: FunctionId, module_bytes: &[u8], memory_limit_pages: usize) -> Result<FunctionDef> {
    if module_bytes.is_empty() {
        return Err(Error::Validation("empty module".into()));
    }
    Validator::new()
        .validate_all(module_bytes)
        .map_err(|e| Error::Validation(e.to_string()))?;
    let (rewritten, info) = add_state_exports(module_bytes)?;
    let min = info.memory_min_pages.unwrap_or(0) as usize;
    if min > memory_limit_pages {
        return Err(Error::Limit(format!(
            "module declares {min} pages, limit is {memory_limit_pages}"
        )));
    }
    if (memory_limit_pages as u64) * (WASM_PAGE as u64) > u32::MAX as u64 + 1 {
        return Err(Error::Limit("memory limit beyond the 32-bit address space".into()));
    }
    let module = Module::new(engine(), &rewritten).map_err(|e| Error::Validation(format!("{e:#}")))?;
    link(id, module_bytes, module, info, memory_limit_pages)
}

/// Rebuilds a definition from `module_bytes` and the machine code that
/// [`FunctionDef::object_code`] produced for it, skipping compilation.
///
/// # Safety
///
/// `object` must come from `object_code` of a definition for the same
/// `module_bytes`, built by this process's engine configuration. The engine
/// checks the header but trusts the machine code.
pub unsafe fn load_object(
    id: FunctionId,
    module_bytes: &[u8],
    object: &[u8],
    memory_limit_pages: usize,
) -> Result<FunctionDef> {
    let (_, info) = add_state_exports(module_bytes)?;
    let module = unsafe { Module::deserialize(engine(), object) }.map_err(|e| Error::Validation(format!("{e:#}")))?;
    link(id, module_bytes, module, info, memory_limit_pages)
}

fn link(
    id: FunctionId,
    module_bytes: &[u8],
    module: Module,
    info: ModuleInfo,
    memory_limit_pages: usize,
) -> Result<FunctionDef> {
    let min = info.memory_min_pages.unwrap_or(0) as usize;
    for imp in module.imports() {
        if !crate::host::is_host_import(imp.module(), imp.name()) {
            return Err(Error::Link(format!("unknown import {}.{}", imp.module(), imp.name())));
        }
    }
    let pre = crate::host::linker()
        .instantiate_pre(&module)
        .map_err(|e| Error::Link(format!("{e:#}")))?;
    if !is_entry(&module, MAIN_ENTRY)? {
        return Err(Error::Link(format!("module does not export {MAIN_ENTRY}")));
    }
    let init_entry = is_entry(&module, INIT_ENTRY)?.then(|| INIT_ENTRY.to_string());
    Ok(FunctionDef {
        id,
        module_bytes: module_bytes.into(),
        memory_limit_pages,
        declared_min_pages: min,
        has_memory: info.memory_min_pages.is_some(),
        init_entry,
        main_entry: MAIN_ENTRY.to_string(),
        pre,
        global_exports: info
            .mutable_globals
            .iter()
            .map(|i| (*i, format!("{GLOBAL_EXPORT_PREFIX}{i}")))
            .collect(),
    })
}

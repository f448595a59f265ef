//! The `faasm` namespace: call I/O, chaining, state and memory.

use std::sync::Arc;

use wasmtime::Linker;

use super::{neg, read_guest, read_str, status, value64, write_guest, write_u32, Ctx, FAASM_NAMESPACE};
use crate::error::{Error, Result};
use crate::sandbox::{grow_private, map_shared_region, violation, FaasletData, PAGE_SIZE};
use crate::state::{LockMode, StateKey, StateValue, CREATE_EMPTY};

pub(super) const NAMES: &[&str] = &[
    "read_call_input",
    "write_call_output",
    "chain_call",
    "await_call",
    "get_call_output",
    "get_state",
    "get_state_offset",
    "get_state_size",
    "set_state",
    "set_state_offset",
    "push_state",
    "push_state_offset",
    "pull_state",
    "pull_state_offset",
    "append_state",
    "read_appended_state",
    "lock_state_read",
    "unlock_state_read",
    "lock_state_write",
    "unlock_state_write",
    "lock_state_global_read",
    "unlock_state_global_read",
    "lock_state_global_write",
    "unlock_state_global_write",
    "sbrk",
    "brk",
    "mmap",
    "munmap",
    "socket",
    "connect",
    "bind",
    "send",
    "recv",
    "dup",
];

const MAP_ANONYMOUS: i32 = 0x20;

fn key(caller: &Ctx<'_>, ptr: i32, len: i32) -> wasmtime::Result<Result<StateKey>> {
    Ok(match read_str(caller, ptr, len)? {
        Some(name) => caller.data().host.key(&name),
        None => Err(Error::Invalid("state key is not UTF-8".into())),
    })
}

fn non_negative(v: i64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::Range(format!("negative {what} {v}")))
}

/// Guest offset of the region mapping `value`, mapping it on first use.
fn region(caller: &mut Ctx<'_>, value: Arc<StateValue>) -> Result<usize> {
    if let Some((cached, off)) = caller.data().host.regions.get(value.key()) {
        if Arc::ptr_eq(cached, &value) {
            return Ok(*off);
        }
    }
    let off = map_shared_region(&mut *caller, value.clone(), value.len())?;
    caller.data_mut().host.note_region(value, off);
    Ok(off)
}

fn get_state(caller: &mut Ctx<'_>, k: Result<StateKey>, off: i64, len: i64, flags: i32) -> Result<i64> {
    let k = k?;
    let (off, len) = (non_negative(off, "offset")?, non_negative(len, "length")?);
    let host = &caller.data().host;
    let v = host.tier().get(&k, off, len, flags, host.held(&k))?;
    let base = region(caller, v)?;
    Ok((base + off) as i64)
}

fn state_size(caller: &Ctx<'_>, k: Result<StateKey>) -> Result<i64> {
    let k = k?;
    let tier = caller.data().host.tier();
    if let Some(v) = tier.lookup(&k) {
        return Ok(v.len() as i64);
    }
    match tier.global().size(&k.global())? {
        Some(n) => Ok(n as i64),
        None => Err(Error::NotFound(k.to_string())),
    }
}

fn set_state(caller: &Ctx<'_>, k: Result<StateKey>, data: &[u8], off: Option<i64>) -> Result<()> {
    let k = k?;
    let host = &caller.data().host;
    let tier = host.tier();
    let v = match off {
        None => tier.replica(&k, data.len(), CREATE_EMPTY)?,
        Some(off) => {
            let off = non_negative(off, "offset")?;
            tier.replica(&k, off + data.len(), 0)?
        }
    };
    tier.set(&v, off.unwrap_or(0) as usize, data, host.held(&k))
}

fn push_state(caller: &Ctx<'_>, k: Result<StateKey>, span: Option<(i64, i64)>) -> Result<()> {
    let k = k?;
    let host = &caller.data().host;
    let tier = host.tier();
    let v = tier
        .lookup(&k)
        .ok_or_else(|| Error::NotFound(format!("{k} has no local replica")))?;
    let (off, len) = match span {
        Some((o, l)) => (non_negative(o, "offset")?, non_negative(l, "length")?),
        None => (0, v.len()),
    };
    tier.push(&v, off, len, host.held(&k)).map(|_| ())
}

fn pull_state(caller: &Ctx<'_>, k: Result<StateKey>, span: Option<(i64, i64)>) -> Result<()> {
    let k = k?;
    let host = &caller.data().host;
    let tier = host.tier();
    let v = tier.replica(&k, 0, 0)?;
    let (off, len) = match span {
        Some((o, l)) => (non_negative(o, "offset")?, non_negative(l, "length")?),
        None => (0, v.len()),
    };
    tier.pull(&v, off, len, host.held(&k))
}

fn lock_local(caller: &mut Ctx<'_>, k: Result<StateKey>, mode: LockMode) -> Result<()> {
    let k = k?;
    let host = &caller.data().host;
    if host.local_locks.contains_key(&k) {
        return Err(Error::Reentrant(k.to_string()));
    }
    let v = host.tier().replica(&k, 0, 0)?;
    let held = match mode {
        LockMode::Read => {
            v.lock_read();
            crate::state::Held::Read
        }
        LockMode::Write => {
            v.lock_write();
            crate::state::Held::Write
        }
    };
    caller.data_mut().host.local_locks.insert(k, (v, held));
    Ok(())
}

fn unlock_local(caller: &mut Ctx<'_>, k: Result<StateKey>, mode: LockMode) -> Result<()> {
    let k = k?;
    let locks = &mut caller.data_mut().host.local_locks;
    let want = match mode {
        LockMode::Read => crate::state::Held::Read,
        LockMode::Write => crate::state::Held::Write,
    };
    match locks.get(&k) {
        Some((_, h)) if *h == want => {}
        _ => return Err(Error::NotHeld(k.to_string())),
    }
    let (v, _) = locks.remove(&k).unwrap();
    // SAFETY: the table entry shows this Faaslet holds the lock in `mode`.
    unsafe {
        match mode {
            LockMode::Read => v.unlock_read(),
            LockMode::Write => v.unlock_write(),
        }
    }
    Ok(())
}

fn lock_global(caller: &mut Ctx<'_>, k: Result<StateKey>, mode: LockMode) -> Result<()> {
    let k = k?;
    let host = &caller.data().host;
    if host.global_locks.contains_key(&k) {
        return Err(Error::Reentrant(k.to_string()));
    }
    let token = host.tier().lock_global(&k, mode)?;
    caller.data_mut().host.global_locks.insert(k, (mode, token));
    Ok(())
}

fn unlock_global(caller: &mut Ctx<'_>, k: Result<StateKey>, mode: LockMode) -> Result<()> {
    let k = k?;
    let host = &mut caller.data_mut().host;
    match host.global_locks.get(&k) {
        Some((m, _)) if *m == mode => {}
        _ => return Err(Error::NotHeld(k.to_string())),
    }
    let (_, token) = host.global_locks.remove(&k).unwrap();
    host.tier().unlock_global(&k, token)
}

fn memory_bytes(caller: &Ctx<'_>) -> usize {
    caller.data().memory.map_or(0, |m| m.data_size(caller))
}

fn grow_bytes(caller: &mut Ctx<'_>, bytes: usize) -> Result<usize> {
    Ok(grow_private(&mut *caller, bytes.div_ceil(PAGE_SIZE))? * PAGE_SIZE)
}

pub(super) fn add_to_linker(linker: &mut Linker<FaasletData>) -> wasmtime::Result<()> {
    let ns = FAASM_NAMESPACE;

    linker.func_wrap(ns, "read_call_input", |mut caller: Ctx<'_>, buf: i32, len: i32| {
        let input = caller
            .data()
            .host
            .call()
            .map_or_else(|| Arc::from(&[][..]), |c| c.input.clone());
        let n = (len as u32 as usize).min(input.len());
        write_guest(&mut caller, buf, &input[..n])?;
        Ok(input.len() as i32)
    })?;
    linker.func_wrap(ns, "write_call_output", |mut caller: Ctx<'_>, ptr: i32, len: i32| {
        let bytes = read_guest(&caller, ptr, len)?;
        let Some(call) = caller.data_mut().host.call.as_mut() else {
            return Err(violation("output written outside a call"));
        };
        if call.output.is_some() {
            return Err(violation("call output written twice"));
        }
        call.output = Some(bytes);
        Ok(())
    })?;
    linker.func_wrap(
        ns,
        "chain_call",
        |mut caller: Ctx<'_>, name: i32, name_len: i32, input: i32, input_len: i32| {
            let name = read_str(&caller, name, name_len)?;
            let input = read_guest(&caller, input, input_len)?;
            let host = &caller.data().host;
            let r = match (name, host.call()) {
                (None, _) => Err(Error::Invalid("function name is not UTF-8".into())),
                (_, None) => Err(Error::Invalid("chaining outside a call".into())),
                (Some(name), Some(parent)) => host.env.dispatcher.chain(&host.env, parent, &name, input),
            };
            if let Ok(id) = r {
                if let Some(c) = caller.data_mut().host.call.as_mut() {
                    c.chained.push(id);
                }
            }
            Ok(value64(r))
        },
    )?;
    linker.func_wrap(ns, "await_call", |mut caller: Ctx<'_>, id: i64, code_out: i32| {
        let host = &caller.data().host;
        match host.env.dispatcher.await_call(host.user(), id) {
            Ok(code) => {
                write_u32(&mut caller, code_out, code as u32)?;
                Ok(0)
            }
            Err(e) => Ok(neg(&e)),
        }
    })?;
    linker.func_wrap(
        ns,
        "get_call_output",
        |mut caller: Ctx<'_>, id: i64, buf: i32, len: i32| {
            let host = &caller.data().host;
            match host.env.dispatcher.output(host.user(), id) {
                Ok(out) => {
                    let n = (len as u32 as usize).min(out.len());
                    write_guest(&mut caller, buf, &out[..n])?;
                    Ok(out.len() as i64)
                }
                Err(e) => Ok(neg(&e) as i64),
            }
        },
    )?;

    linker.func_wrap(
        ns,
        "get_state",
        |mut caller: Ctx<'_>, k: i32, kl: i32, len: i64, flags: i32| {
            let k = key(&caller, k, kl)?;
            Ok(value64(get_state(&mut caller, k, 0, len, flags)))
        },
    )?;
    linker.func_wrap(
        ns,
        "get_state_offset",
        |mut caller: Ctx<'_>, k: i32, kl: i32, off: i64, len: i64, flags: i32| {
            let k = key(&caller, k, kl)?;
            Ok(value64(get_state(&mut caller, k, off, len, flags)))
        },
    )?;
    linker.func_wrap(ns, "get_state_size", |caller: Ctx<'_>, k: i32, kl: i32| {
        let k = key(&caller, k, kl)?;
        Ok(value64(state_size(&caller, k)))
    })?;
    linker.func_wrap(ns, "set_state", |caller: Ctx<'_>, k: i32, kl: i32, v: i32, vl: i32| {
        let k = key(&caller, k, kl)?;
        let data = read_guest(&caller, v, vl)?;
        Ok(status(set_state(&caller, k, &data, None)))
    })?;
    linker.func_wrap(
        ns,
        "set_state_offset",
        |caller: Ctx<'_>, k: i32, kl: i32, v: i32, vl: i32, off: i64| {
            let k = key(&caller, k, kl)?;
            let data = read_guest(&caller, v, vl)?;
            Ok(status(set_state(&caller, k, &data, Some(off))))
        },
    )?;
    linker.func_wrap(ns, "push_state", |caller: Ctx<'_>, k: i32, kl: i32| {
        let k = key(&caller, k, kl)?;
        Ok(status(push_state(&caller, k, None)))
    })?;
    linker.func_wrap(
        ns,
        "push_state_offset",
        |caller: Ctx<'_>, k: i32, kl: i32, off: i64, len: i64| {
            let k = key(&caller, k, kl)?;
            Ok(status(push_state(&caller, k, Some((off, len)))))
        },
    )?;
    linker.func_wrap(ns, "pull_state", |caller: Ctx<'_>, k: i32, kl: i32| {
        let k = key(&caller, k, kl)?;
        Ok(status(pull_state(&caller, k, None)))
    })?;
    linker.func_wrap(
        ns,
        "pull_state_offset",
        |caller: Ctx<'_>, k: i32, kl: i32, off: i64, len: i64| {
            let k = key(&caller, k, kl)?;
            Ok(status(pull_state(&caller, k, Some((off, len)))))
        },
    )?;
    linker.func_wrap(
        ns,
        "append_state",
        |caller: Ctx<'_>, k: i32, kl: i32, v: i32, vl: i32| {
            let k = key(&caller, k, kl)?;
            let data = read_guest(&caller, v, vl)?;
            let tier = caller.data().host.tier();
            Ok(status(k.and_then(|k| tier.append(&k, &data))))
        },
    )?;
    linker.func_wrap(
        ns,
        "read_appended_state",
        |mut caller: Ctx<'_>, k: i32, kl: i32, buf: i32, len: i32| {
            let k = key(&caller, k, kl)?;
            let tier = caller.data().host.tier();
            match k.and_then(|k| tier.read_appended(&k)) {
                Ok(segs) => {
                    let enc = faaslite_guest::codec::encode_segments(&segs);
                    let n = (len as u32 as usize).min(enc.len());
                    write_guest(&mut caller, buf, &enc[..n])?;
                    Ok(enc.len() as i64)
                }
                Err(e) => Ok(neg(&e) as i64),
            }
        },
    )?;

    macro_rules! lock_fn {
        ($name:literal, $f:ident, $mode:expr) => {
            linker.func_wrap(ns, $name, |mut caller: Ctx<'_>, k: i32, kl: i32| {
                let k = key(&caller, k, kl)?;
                Ok(status($f(&mut caller, k, $mode)))
            })?;
        };
    }
    lock_fn!("lock_state_read", lock_local, LockMode::Read);
    lock_fn!("unlock_state_read", unlock_local, LockMode::Read);
    lock_fn!("lock_state_write", lock_local, LockMode::Write);
    lock_fn!("unlock_state_write", unlock_local, LockMode::Write);
    lock_fn!("lock_state_global_read", lock_global, LockMode::Read);
    lock_fn!("unlock_state_global_read", unlock_global, LockMode::Read);
    lock_fn!("lock_state_global_write", lock_global, LockMode::Write);
    lock_fn!("unlock_state_global_write", unlock_global, LockMode::Write);

    linker.func_wrap(ns, "sbrk", |mut caller: Ctx<'_>, delta: i32| {
        if delta <= 0 {
            return Ok(memory_bytes(&caller) as i32);
        }
        Ok(grow_bytes(&mut caller, delta as usize).map_or(-1, |old| old as i32))
    })?;
    linker.func_wrap(ns, "brk", |mut caller: Ctx<'_>, addr: i32| {
        let (addr, size) = (addr as u32 as usize, memory_bytes(&caller));
        if addr <= size {
            return Ok(0);
        }
        Ok(grow_bytes(&mut caller, addr - size).map_or(-1, |_| 0))
    })?;
    linker.func_wrap(
        ns,
        "mmap",
        |mut caller: Ctx<'_>, _addr: i32, len: i32, _prot: i32, flags: i32, fd: i32, _off: i64| {
            if flags & MAP_ANONYMOUS == 0 || fd != -1 {
                return Ok(neg(&Error::Unsupported("only anonymous mappings".into())));
            }
            if len <= 0 {
                return Ok(neg(&Error::Invalid(format!("mapping length {len}"))));
            }
            Ok(match grow_bytes(&mut caller, len as usize) {
                Ok(old) => old as i32,
                Err(e) => neg(&e),
            })
        },
    )?;
    // Memory is grow-only; unmapping succeeds without effect.
    linker.func_wrap(ns, "munmap", |_: Ctx<'_>, _addr: i32, _len: i32| Ok(0i32))?;

    linker.func_wrap(ns, "dup", |mut caller: Ctx<'_>, fd: i32| {
        Ok(caller.data_mut().host.fds.dup(fd).unwrap_or_else(|e| -e))
    })?;
    super::net::add_to_linker(linker)
}

//! Routing of chained calls.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::{Condvar, Mutex, RwLock};

use super::{new_call_id, CallContext, HostEnv};
use crate::error::{Error, Result};
use crate::sandbox::{Faaslet, FunctionDef, FunctionId};

/// Creates, awaits and reads chained calls on behalf of guests.
pub trait CallDispatcher: Send + Sync {
    /// Starts `function` (of the parent's user) and returns its call id
    /// without waiting for it.
    fn chain(&self, env: &Arc<HostEnv>, parent: &CallContext, function: &str, input: Vec<u8>) -> Result<i64>;

    /// Blocks until the call finishes; returns its return code. Repeated
    /// awaits return the same code.
    fn await_call(&self, user: &str, call_id: i64) -> Result<i32>;

    /// Output of a finished call, waiting for it if needed.
    fn output(&self, user: &str, call_id: i64) -> Result<Vec<u8>>;
}

/// Refuses every chained call.
pub struct NoChaining;

impl CallDispatcher for NoChaining {
    fn chain(&self, _: &Arc<HostEnv>, _: &CallContext, function: &str, _: Vec<u8>) -> Result<i64> {
        Err(Error::UnknownFunction(function.to_string()))
    }

    fn await_call(&self, _: &str, call_id: i64) -> Result<i32> {
        Err(Error::UnknownCall(call_id))
    }

    fn output(&self, _: &str, call_id: i64) -> Result<Vec<u8>> {
        Err(Error::UnknownCall(call_id))
    }
}

struct Record {
    user: String,
    result: Option<(i32, Vec<u8>)>,
}

#[derive(Default)]
struct Inner {
    functions: RwLock<HashMap<FunctionId, Arc<FunctionDef>>>,
    calls: Mutex<HashMap<i64, Record>>,
    done: Condvar,
}

/// Runs chained calls in this process, each on its own thread in a fresh
/// Faaslet. Used where no node is running.
#[derive(Clone, Default)]
pub struct InlineDispatcher {
    inner: Arc<Inner>,
}

impl InlineDispatcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, def: Arc<FunctionDef>) {
        self.inner.functions.write().insert(def.id.clone(), def);
    }

    fn run(def: &Arc<FunctionDef>, env: &Arc<HostEnv>, ctx: CallContext) -> (i32, Vec<u8>) {
        let started = Faaslet::instantiate(def, env).and_then(|mut f| f.run_init().map(|_| f));
        match started {
            Ok(mut f) => {
                let inv = f.invoke(ctx);
                (inv.return_code, inv.output)
            }
            Err(e) => {
                log::warn!("chained call {} failed to start: {e}", ctx.call_id);
                (-1, Vec::new())
            }
        }
    }

    fn wait(&self, user: &str, call_id: i64) -> Result<(i32, Vec<u8>)> {
        let mut calls = self.inner.calls.lock();
        loop {
            match calls.get(&call_id) {
                Some(r) if r.user == user => {
                    if let Some(res) = &r.result {
                        return Ok(res.clone());
                    }
                }
                _ => return Err(Error::UnknownCall(call_id)),
            }
            self.inner.done.wait(&mut calls);
        }
    }
}

impl CallDispatcher for InlineDispatcher {
    fn chain(&self, env: &Arc<HostEnv>, parent: &CallContext, function: &str, input: Vec<u8>) -> Result<i64> {
        let id = FunctionId::new(&parent.user, function);
        let def = self
            .inner
            .functions
            .read()
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::UnknownFunction(id.to_string()))?;
        let call_id = new_call_id();
        self.inner.calls.lock().insert(
            call_id,
            Record {
                user: parent.user.clone(),
                result: None,
            },
        );
        let mut ctx = CallContext::new(call_id, &id, input);
        ctx.local = parent.local.clone();
        let (inner, env) = (self.inner.clone(), env.clone());
        std::thread::Builder::new()
            .name(format!("call-{call_id}"))
            .spawn(move || {
                let result = InlineDispatcher::run(&def, &env, ctx);
                if let Some(r) = inner.calls.lock().get_mut(&call_id) {
                    r.result = Some(result);
                }
                inner.done.notify_all();
            })?;
        Ok(call_id)
    }

    fn await_call(&self, user: &str, call_id: i64) -> Result<i32> {
        self.wait(user, call_id).map(|(code, _)| code)
    }

    fn output(&self, user: &str, call_id: i64) -> Result<Vec<u8>> {
        self.wait(user, call_id).map(|(_, out)| out)
    }
}

use std::io::Read;
use std::net::SocketAddr;
use std::sync::{Arc, Weak};
use std::thread;
use std::time::Duration;

use tiny_http::{Header, Method, Request, Response, Server};

use super::{CallStatus, NodeInner};
use crate::error::{Error, Result};
use crate::sandbox::FunctionId;

const MAX_BODY: u64 = 256 << 20;

pub(crate) struct HttpServer {
    server: Arc<Server>,
    addr: SocketAddr,
    accept: Option<thread::JoinHandle<()>>,
}

impl HttpServer {
    pub(crate) fn bind(addr: &str, node: Weak<NodeInner>) -> Result<HttpServer> {
        let server = Arc::new(Server::http(addr).map_err(|e| Error::Transport(format!("http bind {addr}: {e}")))?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Transport("http server has no IP address".into()))?;
        let accept = {
            let server = server.clone();
            thread::Builder::new().name("http".into()).spawn(move || {
                for req in server.incoming_requests() {
                    let node = node.clone();
                    let _ = thread::Builder::new()
                        .name("http-req".into())
                        .spawn(move || match node.upgrade() {
                            Some(n) => handle(&n, req),
                            None => {
                                let _ = req.respond(text(503, "node stopped"));
                            }
                        });
                }
            })?
        };
        Ok(HttpServer {
            server,
            addr,
            accept: Some(accept),
        })
    }

    pub(crate) fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub(crate) fn shutdown(&mut self) {
        self.server.unblock();
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

type Reply = Response<std::io::Cursor<Vec<u8>>>;

fn header(k: &str, v: &str) -> Header {
    Header::from_bytes(k.as_bytes(), v.as_bytes()).expect("ascii header")
}

fn text(code: u16, body: &str) -> Reply {
    Response::from_data(body.as_bytes().to_vec()).with_status_code(code)
}

fn json(code: u16, v: &impl serde::Serialize) -> Reply {
    Response::from_data(serde_json::to_vec(v).expect("serialisable"))
        .with_status_code(code)
        .with_header(header("Content-Type", "application/json"))
}

fn error_status(e: &Error) -> u16 {
    match e {
        Error::UnknownFunction(_) | Error::UnknownCall(_) | Error::NotFound(_) => 404,
        Error::Validation(_) | Error::Link(_) | Error::Invalid(_) | Error::Permission(_) => 400,
        Error::Busy(_) => 409,
        _ => 500,
    }
}

fn body(req: &mut Request) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    req.as_reader().take(MAX_BODY + 1).read_to_end(&mut out)?;
    if out.len() as u64 > MAX_BODY {
        return Err(Error::Limit("request body too large".into()));
    }
    Ok(out)
}

fn query_flag(query: &str, name: &str) -> bool {
    query
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .any(|(k, v)| k == name && (v == "1" || v == "true"))
}

fn handle(node: &Arc<NodeInner>, mut req: Request) {
    let url = req.url().to_string();
    let (path, query) = url.split_once('?').unwrap_or((&url, ""));
    let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
    let reply = match (req.method(), parts.as_slice()) {
        (Method::Post, ["f", "upload", user, name]) => match body(&mut req).and_then(|b| {
            let id = FunctionId::new(user, name);
            node.upload(&id, &b)
        }) {
            Ok(v) => text(200, &format!("version {v}\n")),
            Err(e) => text(error_status(&e), &format!("{e}\n")),
        },
        (Method::Post, ["f", "invoke", user, name]) => invoke(node, &mut req, user, name, query_flag(query, "async")),
        (Method::Get, ["f", "status", id]) => match id.parse::<i64>() {
            Ok(id) => match node.status(id) {
                Some(r) => json(200, &r),
                None => text(404, "unknown call\n"),
            },
            Err(_) => text(400, "bad call id\n"),
        },
        (Method::Post, ["f", "file", user, rest @ ..]) if !rest.is_empty() => {
            match body(&mut req).and_then(|b| node.store.put_file(user, &rest.join("/"), &b)) {
                Ok(h) => text(200, &format!("{h}\n")),
                Err(e) => text(error_status(&e), &format!("{e}\n")),
            }
        }
        (Method::Get, ["f", "metrics"]) => {
            let t = node.traffic.snapshot();
            json(
                200,
                &serde_json::json!({
                    "node_id": node.me,
                    "calls": node.meter.calls(),
                    "billable_gb_s": node.meter.gb_seconds(),
                    "global_state_in": t.state_in,
                    "global_state_out": t.state_out,
                    "global_system_in": t.system_in,
                    "global_system_out": t.system_out,
                }),
            )
        }
        (Method::Get, ["f", "health"]) => text(200, "ok\n"),
        _ => text(404, "no such endpoint\n"),
    };
    let _ = req.respond(reply);
}

fn invoke(node: &Arc<NodeInner>, req: &mut Request, user: &str, name: &str, is_async: bool) -> Reply {
    let input = match body(req) {
        Ok(b) => b,
        Err(e) => return text(error_status(&e), &format!("{e}\n")),
    };
    let id = match node.submit(&FunctionId::new(user, name), input) {
        Ok(id) => id,
        Err(e) => return text(error_status(&e), &format!("{e}\n")),
    };
    if is_async {
        return text(202, &format!("{id}\n")).with_header(header("X-Call-Id", &id.to_string()));
    }
    let timeout: Duration = node.cfg.invoke_timeout();
    match node.wait(id, Some(timeout)) {
        Ok(r) if r.status.is_terminal() => {
            let code = if r.status == CallStatus::Completed && r.return_code == 0 {
                200
            } else {
                500
            };
            let mut body = r.output.clone();
            if let Some(e) = &r.error {
                body = format!("{e}\n").into_bytes();
            }
            Response::from_data(body)
                .with_status_code(code)
                .with_header(header("X-Call-Id", &id.to_string()))
                .with_header(header("X-Return-Code", &r.return_code.to_string()))
                .with_header(header("X-Executed-On", r.executed_on.as_deref().unwrap_or("")))
        }
        Ok(_) => text(504, &format!("call {id} still running\n")).with_header(header("X-Call-Id", &id.to_string())),
        Err(e) => text(error_status(&e), &format!("{e}\n")),
    }
}

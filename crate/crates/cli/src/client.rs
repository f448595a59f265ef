//! HTTP client for the node API.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use ureq::Agent;

const BODY_LIMIT: u64 = 1 << 30;

/// Outcome of a synchronous invoke.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invoked {
    pub http_status: u16,
    pub call_id: Option<i64>,
    pub return_code: Option<i32>,
    pub executed_on: Option<String>,
    pub body: Vec<u8>,
}

impl Invoked {
    pub fn ok(&self) -> bool {
        self.http_status == 200
    }
}

/// Client for one node.
#[derive(Clone)]
pub struct Client {
    base: String,
    agent: Agent,
}

fn agent(timeout: Duration) -> Agent {
    Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(timeout))
        .build()
        .into()
}

fn header<T>(resp: &ureq::http::Response<T>, name: &str) -> Option<String> {
    resp.headers()
        .get(name)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .filter(|s| !s.is_empty())
}

impl Client {
    /// `base` is `host:port` or `http://host:port`.
    pub fn new(base: &str) -> Client {
        Client::with_timeout(base, Duration::from_secs(120))
    }

    pub fn with_timeout(base: &str, timeout: Duration) -> Client {
        let base = base.trim_end_matches('/');
        let base = if base.starts_with("http://") {
            base.to_string()
        } else {
            format!("http://{base}")
        };
        Client {
            base,
            agent: agent(timeout),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn post(&self, path: &str, body: &[u8]) -> Result<(u16, ureq::http::Response<ureq::Body>)> {
        let url = format!("{}{path}", self.base);
        let resp = self
            .agent
            .post(&url)
            .send(body)
            .with_context(|| format!("POST {url}"))?;
        Ok((resp.status().as_u16(), resp))
    }

    fn get(&self, path: &str) -> Result<(u16, Vec<u8>)> {
        let url = format!("{}{path}", self.base);
        let mut resp = self.agent.get(&url).call().with_context(|| format!("GET {url}"))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().with_config().limit(BODY_LIMIT).read_to_vec()?;
        Ok((status, body))
    }

    /// Uploads a module; returns the new version.
    pub fn upload(&self, user: &str, name: &str, module: &[u8]) -> Result<u32> {
        let (status, mut resp) = self.post(&format!("/f/upload/{user}/{name}"), module)?;
        let text = resp.body_mut().read_to_string()?;
        if status != 200 {
            bail!("upload {user}/{name}: {status} {}", text.trim());
        }
        text.trim()
            .strip_prefix("version ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| anyhow!("unexpected upload reply {text:?}"))
    }

    /// Adds a read-only file for `user`'s functions.
    pub fn put_file(&self, user: &str, path: &str, bytes: &[u8]) -> Result<()> {
        let (status, mut resp) = self.post(&format!("/f/file/{user}/{path}"), bytes)?;
        if status != 200 {
            bail!(
                "file {user}/{path}: {status} {}",
                resp.body_mut().read_to_string()?.trim()
            );
        }
        Ok(())
    }

    pub fn invoke(&self, user: &str, name: &str, input: &[u8]) -> Result<Invoked> {
        let (status, mut resp) = self.post(&format!("/f/invoke/{user}/{name}"), input)?;
        let call_id = header(&resp, "X-Call-Id").and_then(|v| v.parse().ok());
        let return_code = header(&resp, "X-Return-Code").and_then(|v| v.parse().ok());
        let executed_on = header(&resp, "X-Executed-On");
        let body = resp.body_mut().with_config().limit(BODY_LIMIT).read_to_vec()?;
        Ok(Invoked {
            http_status: status,
            call_id,
            return_code,
            executed_on,
            body,
        })
    }

    /// Submits a call without waiting; returns its id.
    pub fn invoke_async(&self, user: &str, name: &str, input: &[u8]) -> Result<i64> {
        let (status, mut resp) = self.post(&format!("/f/invoke/{user}/{name}?async=1"), input)?;
        let text = resp.body_mut().read_to_string()?;
        if status != 202 {
            bail!("invoke {user}/{name}: {status} {}", text.trim());
        }
        text.trim()
            .parse()
            .map_err(|_| anyhow!("unexpected invoke reply {text:?}"))
    }

    /// The call record as JSON, or `None` for an unknown call.
    pub fn status(&self, call_id: i64) -> Result<Option<serde_json::Value>> {
        let (status, body) = self.get(&format!("/f/status/{call_id}"))?;
        match status {
            200 => Ok(Some(serde_json::from_slice(&body)?)),
            404 => Ok(None),
            s => bail!("status {call_id}: {s} {}", String::from_utf8_lossy(&body).trim()),
        }
    }

    /// Polls until the call reaches a terminal state.
    pub fn wait(&self, call_id: i64, timeout: Duration) -> Result<serde_json::Value> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            if let Some(v) = self.status(call_id)? {
                if matches!(v["status"].as_str(), Some("completed" | "failed")) {
                    return Ok(v);
                }
            }
            if std::time::Instant::now() > deadline {
                bail!("call {call_id} did not finish within {timeout:?}");
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    pub fn metrics(&self) -> Result<serde_json::Value> {
        let (status, body) = self.get("/f/metrics")?;
        if status != 200 {
            bail!("metrics: {status}");
        }
        Ok(serde_json::from_slice(&body)?)
    }

    pub fn health(&self) -> bool {
        matches!(self.get("/f/health"), Ok((200, _)))
    }
}

/// Spreads requests over several nodes in turn.
pub struct Gateway {
    nodes: Vec<Client>,
    next: AtomicUsize,
}

impl Gateway {
    pub fn new(urls: &[String]) -> Result<Gateway> {
        if urls.is_empty() {
            bail!("no node addresses");
        }
        Ok(Gateway {
            nodes: urls.iter().map(|u| Client::new(u)).collect(),
            next: AtomicUsize::new(0),
        })
    }

    pub fn nodes(&self) -> &[Client] {
        &self.nodes
    }

    /// The node for the next request.
    pub fn pick(&self) -> &Client {
        &self.nodes[self.next.fetch_add(1, Ordering::Relaxed) % self.nodes.len()]
    }

    pub fn invoke(&self, user: &str, name: &str, input: &[u8]) -> Result<Invoked> {
        self.pick().invoke(user, name, input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_urls_are_normalised() {
        assert_eq!(Client::new("127.0.0.1:80").base(), "http://127.0.0.1:80");
        assert_eq!(Client::new("http://h:1/").base(), "http://h:1");
    }

    #[test]
    fn gateway_rotates() {
        let g = Gateway::new(&["a:1".into(), "b:2".into(), "c:3".into()]).unwrap();
        let picks: Vec<&str> = (0..6).map(|_| g.pick().base()).collect();
        assert_eq!(
            picks,
            [
                "http://a:1",
                "http://b:2",
                "http://c:3",
                "http://a:1",
                "http://b:2",
                "http://c:3"
            ]
        );
        assert!(Gateway::new(&[]).is_err());
    }
}

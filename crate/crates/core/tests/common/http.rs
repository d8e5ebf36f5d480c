//! A tiny JSON client for daemon tests.

use serde::Serialize;
use serde_json::Value;

pub struct Client {
    base: String,
    agent: ureq::Agent,
}

pub struct Reply {
    pub status: u16,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

impl Client {
    pub fn new(base: &str) -> Client {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Client { base: base.trim_end_matches('/').to_string(), agent }
    }

    fn finish(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Reply {
        let mut resp = resp.expect("request");
        let status = resp.status().as_u16();
        Reply { status, body: resp.body_mut().read_to_vec().unwrap() }
    }

    pub fn get(&self, path: &str) -> Reply {
        Self::finish(self.agent.get(format!("{}{path}", self.base)).call())
    }

    pub fn post_bytes(&self, path: &str, body: &[u8]) -> Reply {
        Self::finish(self.agent.post(format!("{}{path}", self.base)).send(body))
    }

    /// None when the connection fails instead of an HTTP status.
    pub fn try_post<T: Serialize>(&self, path: &str, body: &T) -> Option<Reply> {
        let bytes = plurinet::canonical::to_canonical_bytes(body).unwrap();
        let mut resp = self.agent.post(format!("{}{path}", self.base)).send(&bytes[..]).ok()?;
        let status = resp.status().as_u16();
        Some(Reply { status, body: resp.body_mut().read_to_vec().ok()? })
    }

    pub fn post<T: Serialize>(&self, path: &str, body: &T) -> Reply {
        self.post_bytes(path, &plurinet::canonical::to_canonical_bytes(body).unwrap())
    }
}

//! Agent lookup: a small TCP registry with heartbeats and expiry, and a
//! static peer file for offline use.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::RegistryError;
use crate::ids::{AgentId, ContextId};
use crate::metrics::now_ms;
use crate::placement::PerfValue;
use crate::wire::{Frame, MsgType};

pub const DEFAULT_HEARTBEAT: Duration = Duration::from_secs(5);
/// Three missed heartbeats.
pub const DEFAULT_TTL: Duration = Duration::from_secs(15);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub agent: AgentId,
    pub addr: String,
    #[serde(default)]
    pub last_heartbeat_ms: u64,
    #[serde(default)]
    pub perf: Option<PerfValue>,
}

#[derive(Debug, Clone)]
pub struct Registry {
    entries: BTreeMap<AgentId, RegistryEntry>,
    ttl: Duration,
}

impl Registry {
    pub fn new(ttl: Duration) -> Self {
        Registry { entries: BTreeMap::new(), ttl }
    }

    pub fn register(&mut self, agent: AgentId, addr: &str, now_ms: u64) {
        let e = self.entries.entry(agent).or_insert_with(|| RegistryEntry {
            agent,
            addr: addr.to_string(),
            last_heartbeat_ms: now_ms,
            perf: None,
        });
        e.addr = addr.to_string();
        e.last_heartbeat_ms = now_ms;
    }

    /// Returns false for an agent that is not registered.
    pub fn heartbeat(&mut self, agent: AgentId, perf: Option<PerfValue>, now_ms: u64) -> bool {
        match self.entries.get_mut(&agent) {
            Some(e) => {
                e.last_heartbeat_ms = now_ms;
                if perf.is_some() {
                    e.perf = perf;
                }
                true
            }
            None => false,
        }
    }

    /// Live entries; expired ones are dropped.
    pub fn lookup(&mut self, now_ms: u64) -> Vec<RegistryEntry> {
        let ttl = self.ttl.as_millis() as u64;
        self.entries.retain(|_, e| now_ms.saturating_sub(e.last_heartbeat_ms) <= ttl);
        self.entries.values().cloned().collect()
    }
}

pub fn load_static(path: &Path) -> Result<Vec<RegistryEntry>, RegistryError> {
    let bytes = std::fs::read(path).map_err(|e| RegistryError::StaticFile(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| RegistryError::StaticFile(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RegistryRequest {
    Register { agent: AgentId, addr: String },
    Heartbeat { agent: AgentId, perf: Option<PerfValue> },
    Lookup,
}

/// Serve a registry on `listener` until the process exits. Each request
/// frame gets a REGISTER frame back carrying the live entries.
pub fn serve(listener: TcpListener, ttl: Duration) {
    let reg = Arc::new(Mutex::new(Registry::new(ttl)));
    for stream in listener.incoming() {
        let Ok(stream) = stream else { continue };
        let reg = reg.clone();
        let _ = thread::Builder::new().name("registry-conn".into()).spawn(move || serve_conn(stream, &reg));
    }
}

fn serve_conn(mut stream: TcpStream, reg: &Mutex<Registry>) {
    while let Ok(Some(frame)) = Frame::read_from(&mut stream) {
        let Ok(req) = frame.body::<RegistryRequest>() else { break };
        let now = now_ms();
        let entries = {
            let mut r = reg.lock().expect("registry lock");
            match req {
                RegistryRequest::Register { agent, addr } => r.register(agent, &addr, now),
                RegistryRequest::Heartbeat { agent, perf } => {
                    r.heartbeat(agent, perf, now);
                }
                RegistryRequest::Lookup => {}
            }
            r.lookup(now)
        };
        let reply = Frame::new(MsgType::Register, ContextId(0), &entries).expect("entries encode");
        if reply.write_to(&mut stream).is_err() {
            break;
        }
    }
}

/// Talks to a registry server, falling back to a static peer file.
#[derive(Debug, Clone, Default)]
pub struct RegistryClient {
    pub server: Option<SocketAddr>,
    pub static_file: Option<PathBuf>,
}

impl RegistryClient {
    pub fn request(&self, req: &RegistryRequest) -> Result<Vec<RegistryEntry>, RegistryError> {
        let attempt = self.server.ok_or_else(|| RegistryError::Unreachable("none configured".into())).and_then(|addr| {
            let unreachable = |e: std::io::Error| RegistryError::Unreachable(format!("{addr}: {e}"));
            let mut s = TcpStream::connect_timeout(&addr, Duration::from_secs(2)).map_err(unreachable)?;
            s.set_read_timeout(Some(Duration::from_secs(5))).map_err(unreachable)?;
            let code = match req {
                RegistryRequest::Heartbeat { .. } => MsgType::Heartbeat,
                _ => MsgType::Register,
            };
            Frame::new(code, ContextId(0), req)?.write_to(&mut s)?;
            let reply = Frame::read_from(&mut s)?.ok_or_else(|| RegistryError::Unreachable(format!("{addr}: closed")))?;
            Ok(reply.body()?)
        });
        match (attempt, &self.static_file) {
            (Ok(v), _) => Ok(v),
            (Err(e), Some(path)) => {
                log::warn!("registry: {e}; using {}", path.display());
                load_static(path)
            }
            (Err(e), None) => Err(e),
        }
    }

    pub fn lookup(&self) -> Result<Vec<RegistryEntry>, RegistryError> {
        self.request(&RegistryRequest::Lookup)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_lookup_and_expiry() {
        let mut r = Registry::new(DEFAULT_TTL);
        r.register(AgentId(1), "a:1", 0);
        r.register(AgentId(2), "b:1", 0);
        assert_eq!(r.lookup(1000).iter().map(|e| e.agent).collect::<Vec<_>>(), vec![AgentId(1), AgentId(2)]);
        for t in [5_000, 10_000, 15_000] {
            assert!(r.heartbeat(AgentId(1), None, t));
        }
        assert_eq!(r.lookup(15_001).iter().map(|e| e.agent).collect::<Vec<_>>(), vec![AgentId(1)]);
        assert!(!r.heartbeat(AgentId(2), None, 15_002));
    }

    #[test]
    fn static_file_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("peers.json");
        std::fs::write(&p, r#"[{"agent":1,"addr":"127.0.0.1:7001"},{"agent":2,"addr":"127.0.0.1:7002"}]"#).unwrap();
        let c = RegistryClient { server: None, static_file: Some(p) };
        let got = c.lookup().unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[1].addr, "127.0.0.1:7002");
        assert!(RegistryClient::default().lookup().is_err());
    }

    #[test]
    fn server_roundtrip() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        thread::spawn(move || serve(l, DEFAULT_TTL));
        let c = RegistryClient { server: Some(addr), static_file: None };
        c.request(&RegistryRequest::Register { agent: AgentId(3), addr: "x:1".into() }).unwrap();
        let perf = PerfValue { agent: AgentId(3), value: 0.5, sampled_at_ms: 1, stale: false };
        c.request(&RegistryRequest::Heartbeat { agent: AgentId(3), perf: Some(perf.clone()) }).unwrap();
        let got = c.lookup().unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].perf, Some(perf));
    }
}

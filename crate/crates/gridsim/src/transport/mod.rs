//! Frame delivery between agents: an in-process hub, and TCP with one
//! connection per agent pair.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use crossbeam_channel::{unbounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

use crate::error::TransportError;
use crate::ids::{AgentId, ContextId};
use crate::wire::{Frame, MsgType};

/// What an agent's router reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inbound {
    Frame { from: AgentId, frame: Frame },
    /// The connection to this peer closed or broke.
    PeerLost(AgentId),
}

pub trait Link: Send + Sync {
    fn me(&self) -> AgentId;
    fn send(&self, to: AgentId, frame: &Frame) -> Result<(), TransportError>;
}

/// In-process delivery. Frames still go through the byte codec so both
/// transports carry exactly the same thing.
#[derive(Default)]
pub struct LocalHub {
    inboxes: Mutex<BTreeMap<AgentId, Sender<Inbound>>>,
}

impl LocalHub {
    pub fn new() -> Arc<Self> {
        Arc::new(LocalHub::default())
    }

    pub fn attach(self: &Arc<Self>, me: AgentId) -> (Arc<dyn Link>, Receiver<Inbound>) {
        let (tx, rx) = unbounded();
        self.inboxes.lock().expect("hub lock").insert(me, tx);
        (Arc::new(LocalLink { hub: self.clone(), me }), rx)
    }

    /// Remove an agent and tell everyone else it is gone.
    pub fn detach(&self, me: AgentId) {
        let mut inboxes = self.inboxes.lock().expect("hub lock");
        inboxes.remove(&me);
        for tx in inboxes.values() {
            let _ = tx.send(Inbound::PeerLost(me));
        }
    }
}

struct LocalLink {
    hub: Arc<LocalHub>,
    me: AgentId,
}

impl Link for LocalLink {
    fn me(&self) -> AgentId {
        self.me
    }

    fn send(&self, to: AgentId, frame: &Frame) -> Result<(), TransportError> {
        let (frame, _) = Frame::decode(&frame.encode())?;
        let inboxes = self.hub.inboxes.lock().expect("hub lock");
        let tx = inboxes.get(&to).ok_or(TransportError::Unreachable(to))?;
        tx.send(Inbound::Frame { from: self.me, frame }).map_err(|_| TransportError::Unreachable(to))
    }
}

/// First frame on every connection: who is calling.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Hello {
    agent: AgentId,
}

type Conn = Arc<Mutex<TcpStream>>;

/// TCP endpoint of one agent (or client). Whoever needs to send first dials;
/// the accepted side sends back over the same stream.
pub struct TcpNode {
    me: AgentId,
    addr: SocketAddr,
    peers: Mutex<BTreeMap<AgentId, SocketAddr>>,
    conns: Mutex<BTreeMap<AgentId, Conn>>,
    tx: Sender<Inbound>,
    closed: AtomicBool,
}

impl TcpNode {
    pub fn bind(me: AgentId, addr: &str) -> Result<(Arc<TcpNode>, Receiver<Inbound>), TransportError> {
        let listener = TcpListener::bind(addr)?;
        let (tx, rx) = unbounded();
        let node = Arc::new(TcpNode {
            me,
            addr: listener.local_addr()?,
            peers: Mutex::new(BTreeMap::new()),
            conns: Mutex::new(BTreeMap::new()),
            tx,
            closed: AtomicBool::new(false),
        });
        let n = node.clone();
        thread::Builder::new().name(format!("accept-{me}")).spawn(move || n.accept_loop(listener))?;
        Ok((node, rx))
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn set_peer(&self, agent: AgentId, addr: SocketAddr) {
        self.peers.lock().expect("peers lock").insert(agent, addr);
    }

    /// Close every connection and stop accepting.
    pub fn shutdown(&self) {
        self.closed.store(true, Ordering::SeqCst);
        for c in self.conns.lock().expect("conns lock").values() {
            let _ = c.lock().expect("stream lock").shutdown(Shutdown::Both);
        }
        let _ = TcpStream::connect(self.addr);
    }

    fn accept_loop(self: Arc<Self>, listener: TcpListener) {
        for stream in listener.incoming() {
            if self.closed.load(Ordering::SeqCst) {
                break;
            }
            let Ok(mut stream) = stream else { continue };
            let _ = stream.set_nodelay(true);
            let hello = match Frame::read_from(&mut stream) {
                Ok(Some(f)) if f.msg_type == MsgType::Heartbeat => f.body::<Hello>(),
                _ => continue,
            };
            let Ok(Hello { agent }) = hello else { continue };
            let Ok(reader) = stream.try_clone() else { continue };
            let conn: Conn = Arc::new(Mutex::new(stream));
            self.conns.lock().expect("conns lock").entry(agent).or_insert_with(|| conn.clone());
            self.spawn_reader(agent, reader, conn);
        }
    }

    /// Reads frames from `from` until the stream closes, then forgets `conn`
    /// so a later connection from the same peer replaces it.
    fn spawn_reader(self: &Arc<Self>, from: AgentId, mut stream: TcpStream, conn: Conn) {
        let tx = self.tx.clone();
        let me = self.me;
        let node = self.clone();
        let _ = thread::Builder::new().name(format!("read-{me}-{from}")).spawn(move || loop {
            match Frame::read_from(&mut stream) {
                Ok(Some(frame)) => {
                    if tx.send(Inbound::Frame { from, frame }).is_err() {
                        break;
                    }
                }
                Err(e) if e.is_skippable() => log::warn!("{me}: skipped frame from {from}: {e}"),
                Ok(None) | Err(_) => {
                    let mut conns = node.conns.lock().expect("conns lock");
                    if conns.get(&from).is_some_and(|c| Arc::ptr_eq(c, &conn)) {
                        conns.remove(&from);
                    }
                    drop(conns);
                    let _ = tx.send(Inbound::PeerLost(from));
                    break;
                }
            }
        });
    }

    fn connection(self: &Arc<Self>, to: AgentId) -> Result<Conn, TransportError> {
        let mut conns = self.conns.lock().expect("conns lock");
        if let Some(c) = conns.get(&to) {
            return Ok(c.clone());
        }
        let addr = *self.peers.lock().expect("peers lock").get(&to).ok_or(TransportError::Unreachable(to))?;
        let mut stream = TcpStream::connect(addr).map_err(|_| TransportError::Unreachable(to))?;
        let _ = stream.set_nodelay(true);
        Frame::new(MsgType::Heartbeat, ContextId(0), &Hello { agent: self.me })?.write_to(&mut stream)?;
        let reader = stream.try_clone()?;
        let c: Conn = Arc::new(Mutex::new(stream));
        self.spawn_reader(to, reader, c.clone());
        conns.insert(to, c.clone());
        Ok(c)
    }
}

/// Sending half of a [`TcpNode`].
pub struct TcpLink(pub Arc<TcpNode>);

impl Link for TcpLink {
    fn me(&self) -> AgentId {
        self.0.me
    }

    fn send(&self, to: AgentId, frame: &Frame) -> Result<(), TransportError> {
        let c = self.0.connection(to)?;
        let mut s = c.lock().expect("stream lock");
        s.write_all(&frame.encode()).map_err(|_| TransportError::Unreachable(to))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn frame(n: u64) -> Frame {
        Frame::new(MsgType::Event, ContextId(n), &serde_json::json!({ "n": n })).unwrap()
    }

    fn next(rx: &Receiver<Inbound>) -> Inbound {
        rx.recv_timeout(Duration::from_secs(5)).unwrap()
    }

    #[test]
    fn hub_delivers_in_order_and_reports_unknown() {
        let hub = LocalHub::new();
        let (a, _rx_a) = hub.attach(AgentId(1));
        let (_b, rx_b) = hub.attach(AgentId(2));
        for n in 0..100 {
            a.send(AgentId(2), &frame(n)).unwrap();
        }
        for n in 0..100 {
            assert_eq!(next(&rx_b), Inbound::Frame { from: AgentId(1), frame: frame(n) });
        }
        assert!(matches!(a.send(AgentId(9), &frame(0)), Err(TransportError::Unreachable(AgentId(9)))));
        hub.detach(AgentId(1));
        assert_eq!(next(&rx_b), Inbound::PeerLost(AgentId(1)));
    }

    #[test]
    fn tcp_pair_shares_one_connection() {
        let (a, rx_a) = TcpNode::bind(AgentId(1), "127.0.0.1:0").unwrap();
        let (b, rx_b) = TcpNode::bind(AgentId(2), "127.0.0.1:0").unwrap();
        a.set_peer(AgentId(2), b.local_addr());
        let la = TcpLink(a.clone());
        let lb = TcpLink(b.clone());
        for n in 0..200 {
            la.send(AgentId(2), &frame(n)).unwrap();
        }
        for n in 0..200 {
            assert_eq!(next(&rx_b), Inbound::Frame { from: AgentId(1), frame: frame(n) });
        }
        // b never learned a's address; it answers on the accepted stream.
        lb.send(AgentId(1), &frame(7)).unwrap();
        assert_eq!(next(&rx_a), Inbound::Frame { from: AgentId(2), frame: frame(7) });
        assert!(matches!(la.send(AgentId(3), &frame(0)), Err(TransportError::Unreachable(_))));
        a.shutdown();
        assert_eq!(next(&rx_b), Inbound::PeerLost(AgentId(1)));
        b.shutdown();
    }
}

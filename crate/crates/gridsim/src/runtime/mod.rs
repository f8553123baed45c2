//! The simulation agent: routes frames to per-context engine loops, creates
//! and destroys contexts, and streams results back to the client.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};

use crate::ids::{AgentId, ContextId, LpId};
use crate::metrics::{now_ms, Publisher};
use crate::model::{build_engine, EngineSpec, Model};
use crate::placement::PerfValue;
use crate::results::{ResultRecord, TraceEntry};
use crate::scenario::Scenario;
use crate::sync::{Engine, EpisodeStats, StepOutcome, SyncBody, SyncMessage, SyncStats, DEFAULT_DEADLOCK_TIMEOUT};
use crate::time::VirtualTime;
use crate::transport::{Inbound, Link};
use crate::wire::{Frame, MsgType};

/// Events per engine slice between inbox checks.
const SLICE: usize = 256;
const RESULT_BATCH: usize = 4096;
const PROGRESS_EVERY: Duration = Duration::from_millis(500);

/// Body of `CONTEXT_CREATE` frames. The client sends `Prepare` to every
/// participant, waits for all `Ready`, then sends `Commit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum CreatePhase {
    Prepare { scenario: Box<Scenario>, participants: Vec<AgentId>, client: AgentId },
    Ready { agent: AgentId, perf: PerfValue },
    Failed { agent: AgentId, reason: String },
    Commit,
}

/// Body of `JOB_PLACE`: where job processes live.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobPlace {
    pub routes: Vec<(LpId, AgentId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nack {
    pub msg_type: u8,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Finished,
    Deadlock { time: VirtualTime, detail: String },
    Abort { time: VirtualTime, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEnd {
    pub status: RunStatus,
    pub stats: SyncStats,
    pub episodes: EpisodeStats,
    pub lps_created: u64,
    pub lps_reused: u64,
}

/// Body of `RESULT` frames, agent to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBatch {
    pub agent: AgentId,
    pub clock: VirtualTime,
    pub events: u64,
    pub records: Vec<ResultRecord>,
    pub trace: Vec<TraceEntry>,
    pub end: Option<RunEnd>,
}

/// Frame type carrying a sync message.
pub fn sync_frame_type(body: &SyncBody) -> MsgType {
    match body {
        SyncBody::Event { .. } => MsgType::Event,
        SyncBody::LvtRequest { .. } => MsgType::LvtRequest,
        SyncBody::LvtResponse { .. } | SyncBody::Floor { .. } => MsgType::LvtResponse,
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub id: AgentId,
    pub deadlock_timeout: Duration,
}

impl AgentConfig {
    pub fn new(id: AgentId) -> Self {
        AgentConfig { id, deadlock_timeout: DEFAULT_DEADLOCK_TIMEOUT }
    }
}

enum CtxMsg {
    Sync(SyncMessage),
    Routes(Vec<(LpId, AgentId)>),
    Commit,
    PeerLost(AgentId),
    Destroy,
}

struct Slot {
    tx: Sender<CtxMsg>,
    join: JoinHandle<()>,
}

/// Handle to an agent running on its own router thread.
pub struct AgentHandle {
    pub id: AgentId,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl AgentHandle {
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for AgentHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

pub struct Agent {
    cfg: AgentConfig,
    link: Arc<dyn Link>,
    inbox: Receiver<Inbound>,
    publisher: Publisher,
    contexts: BTreeMap<ContextId, Slot>,
    destroyed: BTreeSet<ContextId>,
}

impl Agent {
    pub fn new(cfg: AgentConfig, link: Arc<dyn Link>, inbox: Receiver<Inbound>, publisher: Publisher) -> Self {
        Agent { cfg, link, inbox, publisher, contexts: BTreeMap::new(), destroyed: BTreeSet::new() }
    }

    pub fn spawn(self) -> AgentHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let id = self.cfg.id;
        let flag = stop.clone();
        let join = thread::Builder::new().name(format!("agent-{id}")).spawn(move || self.run(&flag)).expect("spawn agent");
        AgentHandle { id, stop, join: Some(join) }
    }

    /// Route frames until `stop` is set or the inbox closes.
    pub fn run(mut self, stop: &AtomicBool) {
        while !stop.load(Ordering::SeqCst) {
            match self.inbox.recv_timeout(Duration::from_millis(50)) {
                Ok(Inbound::Frame { from, frame }) => self.route(from, frame),
                Ok(Inbound::PeerLost(p)) => {
                    for slot in self.contexts.values() {
                        let _ = slot.tx.send(CtxMsg::PeerLost(p));
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        for (_, slot) in std::mem::take(&mut self.contexts) {
            let _ = slot.tx.send(CtxMsg::Destroy);
            let _ = slot.join.join();
        }
    }

    fn nack(&self, to: AgentId, frame: &Frame, reason: String) {
        log::debug!("{}: nack to {to} for {}: {reason}", self.cfg.id, frame.context);
        let body = Nack { msg_type: frame.msg_type as u8, reason };
        if let Ok(f) = Frame::new(MsgType::Nack, frame.context, &body) {
            let _ = self.link.send(to, &f);
        }
    }

    fn forward(&self, from: AgentId, frame: &Frame, msg: CtxMsg) {
        match self.contexts.get(&frame.context) {
            Some(slot) => {
                let _ = slot.tx.send(msg);
            }
            None => {
                let why = if self.destroyed.contains(&frame.context) { "destroyed" } else { "unknown" };
                self.nack(from, frame, format!("{why} context {}", frame.context));
            }
        }
    }

    fn route(&mut self, from: AgentId, frame: Frame) {
        let ctx = frame.context;
        match frame.msg_type {
            MsgType::Event | MsgType::LvtRequest | MsgType::LvtResponse => match frame.body::<SyncMessage>() {
                Ok(m) if m.context == ctx && m.sender == from => self.forward(from, &frame, CtxMsg::Sync(m)),
                Ok(_) => self.nack(from, &frame, "sync message does not match its frame".into()),
                Err(e) => self.nack(from, &frame, e.to_string()),
            },
            MsgType::ContextCreate => match frame.body::<CreatePhase>() {
                Ok(CreatePhase::Prepare { scenario, participants, client }) => self.prepare(ctx, *scenario, participants, client, &frame),
                Ok(CreatePhase::Commit) => self.forward(from, &frame, CtxMsg::Commit),
                Ok(_) => {}
                Err(e) => self.nack(from, &frame, e.to_string()),
            },
            MsgType::JobPlace => match frame.body::<JobPlace>() {
                Ok(p) => self.forward(from, &frame, CtxMsg::Routes(p.routes)),
                Err(e) => self.nack(from, &frame, e.to_string()),
            },
            MsgType::ContextDestroy => {
                if let Some(slot) = self.contexts.remove(&ctx) {
                    let _ = slot.tx.send(CtxMsg::Destroy);
                    let _ = slot.join.join();
                    self.destroyed.insert(ctx);
                }
            }
            MsgType::Nack => {
                let why = frame.body::<Nack>().map(|n| n.reason).unwrap_or_default();
                log::warn!("{}: {from} refused a frame for {ctx}: {why}", self.cfg.id);
            }
            MsgType::Heartbeat | MsgType::PerfPublish | MsgType::Register | MsgType::Result => {}
        }
    }

    fn prepare(&mut self, ctx: ContextId, scenario: Scenario, participants: Vec<AgentId>, client: AgentId, frame: &Frame) {
        if self.contexts.contains_key(&ctx) {
            self.nack(client, frame, format!("context {ctx} already exists"));
            return;
        }
        self.destroyed.remove(&ctx);
        let me = self.cfg.id;
        let perf = self.publisher.publish(now_ms());
        let (tx, rx) = unbounded();
        let link = self.link.clone();
        let timeout = self.cfg.deadlock_timeout;
        let spawned = thread::Builder::new().name(format!("ctx-{me}-{ctx}")).spawn(move || {
            let mut spec = EngineSpec::new(&scenario, ctx, me, participants);
            spec.deadlock_timeout = timeout;
            let built = Model::build(&scenario).map_err(|e| e.to_string()).and_then(|m| {
                let e = build_engine(&m, &spec).map_err(|e| e.to_string())?;
                Ok((m, e))
            });
            let reply = match &built {
                Ok(_) => CreatePhase::Ready { agent: me, perf },
                Err(reason) => CreatePhase::Failed { agent: me, reason: reason.clone() },
            };
            if let Ok(f) = Frame::new(MsgType::ContextCreate, ctx, &reply) {
                let _ = link.send(client, &f);
            }
            if let Ok((model, engine)) = built {
                ContextLoop { link, rx, engine, client, spec, _model: model, events: 0 }.run();
            } else {
                while !matches!(rx.recv(), Ok(CtxMsg::Destroy) | Err(_)) {}
            }
        });
        match spawned {
            Ok(join) => {
                self.contexts.insert(ctx, Slot { tx, join });
            }
            Err(e) => self.nack(client, frame, e.to_string()),
        }
    }
}

struct ContextLoop {
    link: Arc<dyn Link>,
    rx: Receiver<CtxMsg>,
    engine: Engine,
    client: AgentId,
    spec: EngineSpec,
    _model: Model,
    events: u64,
}

enum Flow {
    Go,
    Stop,
}

impl ContextLoop {
    fn run(mut self) {
        // Before commit: take routes and early sync traffic, wait for the go.
        loop {
            match self.rx.recv() {
                Ok(CtxMsg::Commit) => break,
                Ok(CtxMsg::Destroy) | Err(_) => return,
                Ok(m) => {
                    if let Flow::Stop = self.apply(m) {
                        return self.linger();
                    }
                }
            }
        }
        let mut ended = false;
        let mut last_progress = Instant::now();
        loop {
            while let Ok(m) = self.rx.try_recv() {
                if let CtxMsg::Destroy = m {
                    return;
                }
                if let Flow::Stop = self.apply(m) {
                    return self.linger();
                }
            }
            let out = match self.engine.run_steps(SLICE) {
                Ok(o) => o,
                Err(e) => {
                    self.end(RunStatus::Abort { time: self.engine.local_clock(), detail: e.to_string() });
                    return self.linger();
                }
            };
            if let Flow::Stop = self.flush() {
                return self.linger();
            }
            if self.engine.is_finished() && !ended {
                ended = true;
                self.end(RunStatus::Finished);
            } else if last_progress.elapsed() >= PROGRESS_EVERY {
                last_progress = Instant::now();
                self.batch(None);
            }
            if matches!(out, StepOutcome::Processed(_)) {
                continue;
            }
            if !ended {
                if let Some(detail) = self.engine.detect_deadlock() {
                    self.end(RunStatus::Deadlock { time: self.engine.local_clock(), detail });
                    return self.linger();
                }
            }
            match self.rx.recv_timeout(Duration::from_millis(20)) {
                Ok(CtxMsg::Destroy) | Err(RecvTimeoutError::Disconnected) => return,
                Ok(m) => {
                    if let Flow::Stop = self.apply(m) {
                        return self.linger();
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
            }
        }
    }

    fn apply(&mut self, m: CtxMsg) -> Flow {
        match m {
            CtxMsg::Sync(m) => {
                if let Err(e) = self.engine.deliver(m) {
                    self.end(RunStatus::Abort { time: self.engine.local_clock(), detail: e.to_string() });
                    return Flow::Stop;
                }
            }
            CtxMsg::Routes(r) => self.engine.set_routes(r),
            CtxMsg::PeerLost(p) => {
                if self.spec.participants.contains(&p) || p == self.client {
                    let detail = format!("lost connection to {p}");
                    self.end(RunStatus::Abort { time: self.engine.local_clock(), detail });
                    return Flow::Stop;
                }
            }
            CtxMsg::Commit | CtxMsg::Destroy => {}
        }
        Flow::Go
    }

    fn flush(&mut self) -> Flow {
        for (to, m) in self.engine.take_outbox() {
            let sent = Frame::new(sync_frame_type(&m.body), m.context, &m).map_err(|e| e.to_string()).and_then(|f| {
                self.link.send(to, &f).map_err(|e| e.to_string())
            });
            if let Err(e) = sent {
                self.end(RunStatus::Abort { time: self.engine.local_clock(), detail: format!("send to {to}: {e}") });
                return Flow::Stop;
            }
        }
        Flow::Go
    }

    fn batch(&mut self, end: Option<RunEnd>) {
        let mut records = self.engine.take_records();
        let mut trace = self.engine.take_trace();
        self.events += trace.len() as u64;
        let me = self.spec.me;
        let clock = self.engine.local_clock();
        let ctx = self.spec.context;
        // Split into bounded frames; the end marker goes with the last.
        loop {
            let r: Vec<ResultRecord> = records.drain(..records.len().min(RESULT_BATCH)).collect();
            let t: Vec<TraceEntry> = trace.drain(..trace.len().min(RESULT_BATCH)).collect();
            let last = records.is_empty() && trace.is_empty();
            let b = ResultBatch { agent: me, clock, events: self.events, records: r, trace: t, end: if last { end.clone() } else { None } };
            if let Ok(f) = Frame::new(MsgType::Result, ctx, &b) {
                let _ = self.link.send(self.client, &f);
            }
            if last {
                break;
            }
        }
    }

    fn end(&mut self, status: RunStatus) {
        let e = &self.engine;
        let end = RunEnd { status, stats: e.stats(), episodes: e.episodes(), lps_created: e.lps_created, lps_reused: e.lps_reused };
        self.batch(Some(end));
    }

    /// After an abort, wait for the context to be destroyed.
    fn linger(self) {
        while !matches!(self.rx.recv(), Ok(CtxMsg::Destroy) | Err(_)) {}
    }
}

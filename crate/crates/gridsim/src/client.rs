//! Client side of a run: create the context on every participant, plan job
//! placement, collect results into a pool, tear the context down.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError};

use crate::error::{PlacementError, RunError, TransportError};
use crate::ids::{AgentId, ContextId, LpId};
use crate::metrics::{source_for, Publisher};
use crate::model::Model;
use crate::placement::{choose_agent, PerfValue, DEFAULT_WEIGHTS};
use crate::results::{derive_metrics, ResultPool, ResultRecord, TraceEntry};
use crate::runtime::{Agent, AgentConfig, AgentHandle, CreatePhase, JobPlace, Nack, ResultBatch, RunEnd, RunStatus};
use crate::scenario::Scenario;
use crate::sync::DEFAULT_DEADLOCK_TIMEOUT;
use crate::event::EventKey;
use crate::time::VirtualTime;
use crate::transport::{Inbound, Link, LocalHub, TcpLink, TcpNode};
use crate::wire::{Frame, MsgType};

pub type Progress = Box<dyn FnMut(VirtualTime, u64) + Send>;

pub struct RunOptions {
    pub context: ContextId,
    pub create_timeout: Duration,
    /// Give up when no agent has said anything for this long.
    pub silence_timeout: Duration,
    pub deadlock_timeout: Duration,
    pub progress: Option<Progress>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            context: ContextId(1),
            create_timeout: Duration::from_secs(10),
            silence_timeout: Duration::from_secs(30),
            deadlock_timeout: DEFAULT_DEADLOCK_TIMEOUT,
            progress: None,
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub pool: ResultPool,
    pub ends: BTreeMap<AgentId, RunEnd>,
    /// Events an LP processed with a key not above its previous one, as
    /// seen in the order agents reported them.
    pub out_of_order: u64,
}

impl RunOutput {
    pub fn sync_messages(&self) -> u64 {
        self.ends.values().map(|e| e.stats.sync_messages_sent()).sum()
    }
}

/// Assign each job process to an agent. Published load is combined with the
/// process count each agent already carries, so jobs spread out as they are
/// placed.
pub fn plan_jobs(
    model: &Model,
    agents: &[AgentId],
    perf: &BTreeMap<AgentId, PerfValue>,
) -> Result<BTreeMap<LpId, AgentId>, PlacementError> {
    let jobs = model.job_lps();
    let mut load: BTreeMap<AgentId, u64> = agents.iter().map(|a| (*a, 0)).collect();
    for host in model.static_routes(agents).values() {
        *load.get_mut(host).expect("participant") += 1;
    }
    let total = (model.static_lps().len() + jobs.len()).max(1) as f64;
    let w = DEFAULT_WEIGHTS[2];
    let participating: BTreeSet<AgentId> = agents.iter().copied().collect();
    let mut routes = BTreeMap::new();
    for lp in jobs {
        let values: Vec<PerfValue> = agents
            .iter()
            .map(|a| {
                let base = perf.get(a).map(|p| p.value).unwrap_or(0.0);
                PerfValue { agent: *a, value: base * (1.0 - w) + w * load[a] as f64 / total, sampled_at_ms: 0, stale: false }
            })
            .collect();
        let a = choose_agent(&values, &participating, |_| true)?;
        *load.get_mut(&a).expect("participant") += 1;
        routes.insert(lp, a);
    }
    Ok(routes)
}

pub struct Client {
    link: Arc<dyn Link>,
    inbox: Receiver<Inbound>,
}

impl Client {
    pub fn new(link: Arc<dyn Link>, inbox: Receiver<Inbound>) -> Self {
        Client { link, inbox }
    }

    fn broadcast<T: serde::Serialize>(&self, agents: &[AgentId], t: MsgType, ctx: ContextId, body: &T) -> Result<(), RunError> {
        let f = Frame::new(t, ctx, body).map_err(TransportError::from)?;
        for a in agents {
            self.link.send(*a, &f)?;
        }
        Ok(())
    }

    fn destroy(&self, agents: &[AgentId], ctx: ContextId) {
        if let Ok(f) = Frame::new(MsgType::ContextDestroy, ctx, &serde_json::json!({})) {
            for a in agents {
                let _ = self.link.send(*a, &f);
            }
        }
    }

    pub fn run(&self, s: &Scenario, agents: &[AgentId], mut opts: RunOptions) -> Result<RunOutput, RunError> {
        s.validate()?;
        let model = Model::build(s)?;
        let ctx = opts.context;
        let prepare =
            CreatePhase::Prepare { scenario: Box::new(s.clone()), participants: agents.to_vec(), client: self.link.me() };
        if let Err(e) = self.broadcast(agents, MsgType::ContextCreate, ctx, &prepare) {
            self.destroy(agents, ctx);
            return Err(RunError::ContextCreate(e.to_string()));
        }
        let perf = match self.await_ready(agents, ctx, opts.create_timeout) {
            Ok(p) => p,
            Err(e) => {
                self.destroy(agents, ctx);
                return Err(e);
            }
        };
        let routes = plan_jobs(&model, agents, &perf)?;
        if !routes.is_empty() {
            self.broadcast(agents, MsgType::JobPlace, ctx, &JobPlace { routes: routes.into_iter().collect() })?;
        }
        self.broadcast(agents, MsgType::ContextCreate, ctx, &CreatePhase::Commit)?;
        let collected = self.collect(agents, ctx, &mut opts);
        self.destroy(agents, ctx);
        let (records, trace, ends, out_of_order) = collected?;

        for (a, e) in &ends {
            match &e.status {
                RunStatus::Finished => {}
                RunStatus::Deadlock { time, detail } => {
                    return Err(RunError::Deadlock { agent: *a, time: *time, detail: detail.clone() })
                }
                RunStatus::Abort { time, detail } => return Err(RunError::Abort { agent: *a, time: *time, detail: detail.clone() }),
            }
        }
        let mut pool = ResultPool::new(ctx, &s.name, s.seed, &s.sha256(), agents.iter().map(|a| a.0).collect());
        let mut records = records;
        let derived = derive_metrics(&records, &s.derived_metrics, ctx, s.horizon);
        records.extend(derived);
        records.sort_by_key(|r| r.sort_key());
        for r in records {
            pool.record_result(r)?;
        }
        let events = trace.len();
        pool.set_trace(trace);
        let h = s.horizon;
        let rt = |metric: &str, v: f64, tags: &[(&str, &str)]| ResultRecord::new(ctx, metric, h, v, tags);
        pool.record_runtime(rt("events_processed", events as f64, &[]))?;
        for (a, e) in &ends {
            let id = a.0.to_string();
            let tags = [("agent", id.as_str())];
            pool.record_runtime(rt("sync_messages", e.stats.sync_messages_sent() as f64, &tags))?;
            pool.record_runtime(rt("lvt_requests", e.stats.requests_sent as f64, &tags))?;
            pool.record_runtime(rt("floor_reports", e.stats.floor_reports as f64, &tags))?;
            pool.record_runtime(rt("blocking_episodes", e.episodes.count as f64, &tags))?;
            pool.record_runtime(rt("episode_max_sync", e.episodes.max_sync as f64, &tags))?;
            pool.record_runtime(rt("events_sent", e.stats.events_sent as f64, &tags))?;
            pool.record_runtime(rt("lps_created", e.lps_created as f64, &tags))?;
            pool.record_runtime(rt("lps_reused", e.lps_reused as f64, &tags))?;
        }
        pool.record_runtime(rt("out_of_order_deliveries", out_of_order as f64, &[]))?;
        Ok(RunOutput { pool, ends, out_of_order })
    }

    fn await_ready(&self, agents: &[AgentId], ctx: ContextId, timeout: Duration) -> Result<BTreeMap<AgentId, PerfValue>, RunError> {
        let deadline = Instant::now() + timeout;
        let mut perf = BTreeMap::new();
        while perf.len() < agents.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            let (from, frame) = match self.inbox.recv_timeout(left) {
                Ok(Inbound::Frame { from, frame }) if frame.context == ctx => (from, frame),
                Ok(Inbound::PeerLost(a)) if agents.contains(&a) => {
                    return Err(RunError::ContextCreate(format!("{a} went away")));
                }
                Ok(_) => continue,
                Err(_) => {
                    let missing: Vec<String> = agents.iter().filter(|a| !perf.contains_key(*a)).map(|a| a.to_string()).collect();
                    return Err(RunError::ContextCreate(format!("no answer from {}", missing.join(", "))));
                }
            };
            match frame.msg_type {
                MsgType::ContextCreate => match frame.body::<CreatePhase>() {
                    Ok(CreatePhase::Ready { agent, perf: p }) => {
                        perf.insert(agent, p);
                    }
                    Ok(CreatePhase::Failed { agent, reason }) => return Err(RunError::ContextCreate(format!("{agent}: {reason}"))),
                    _ => {}
                },
                MsgType::Nack => {
                    let why = frame.body::<Nack>().map(|n| n.reason).unwrap_or_default();
                    return Err(RunError::ContextCreate(format!("{from}: {why}")));
                }
                _ => {}
            }
        }
        Ok(perf)
    }

    #[allow(clippy::type_complexity)]
    fn collect(
        &self,
        agents: &[AgentId],
        ctx: ContextId,
        opts: &mut RunOptions,
    ) -> Result<(Vec<ResultRecord>, Vec<TraceEntry>, BTreeMap<AgentId, RunEnd>, u64), RunError> {
        let mut records = Vec::new();
        let mut last: BTreeMap<LpId, EventKey> = BTreeMap::new();
        let mut out_of_order = 0;
        let mut trace = Vec::new();
        let mut ends: BTreeMap<AgentId, RunEnd> = BTreeMap::new();
        let mut clocks: BTreeMap<AgentId, (VirtualTime, u64)> = BTreeMap::new();
        while ends.len() < agents.len() {
            let (from, frame) = match self.inbox.recv_timeout(opts.silence_timeout) {
                Ok(Inbound::Frame { from, frame }) if frame.context == ctx => (from, frame),
                Ok(Inbound::PeerLost(a)) if agents.contains(&a) && !ends.contains_key(&a) => {
                    return Err(RunError::PeerFailure(format!("lost {a} during {ctx}")));
                }
                Ok(_) => continue,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(RunError::PeerFailure(format!("no word from any agent for {:?}", opts.silence_timeout)))
                }
                Err(RecvTimeoutError::Disconnected) => return Err(RunError::PeerFailure("client inbox closed".into())),
            };
            match frame.msg_type {
                MsgType::Result => {
                    let b: ResultBatch = frame.body().map_err(TransportError::from)?;
                    records.extend(b.records);
                    for t in &b.trace {
                        if last.insert(t.lp, t.key).is_some_and(|prev| prev >= t.key) {
                            out_of_order += 1;
                        }
                    }
                    trace.extend(b.trace);
                    clocks.insert(b.agent, (b.clock, b.events));
                    if let Some(p) = opts.progress.as_mut() {
                        let t = clocks.values().map(|c| c.0).min().unwrap_or(VirtualTime::ZERO);
                        p(t, clocks.values().map(|c| c.1).sum());
                    }
                    if let Some(end) = b.end {
                        let failed = end.status != RunStatus::Finished;
                        ends.insert(b.agent, end);
                        if failed {
                            break;
                        }
                    }
                }
                MsgType::Nack => {
                    let why = frame.body::<Nack>().map(|n| n.reason).unwrap_or_default();
                    return Err(RunError::Abort { agent: from, time: VirtualTime::ZERO, detail: why });
                }
                _ => {}
            }
        }
        Ok((records, trace, ends, out_of_order))
    }
}

/// Agents plus a client, all in this process.
pub struct LocalCluster {
    pub agents: Vec<AgentId>,
    pub client: Client,
    handles: Vec<AgentHandle>,
    hub: Option<Arc<LocalHub>>,
    tcp: Vec<Arc<TcpNode>>,
}

impl LocalCluster {
    /// `n` agents over the in-process hub.
    pub fn in_process(n: u64, s: &Scenario, deadlock_timeout: Duration) -> Result<Self, RunError> {
        let hub = LocalHub::new();
        let agents: Vec<AgentId> = (1..=n).map(AgentId).collect();
        let mut handles = Vec::new();
        for &a in &agents {
            let (link, rx) = hub.attach(a);
            handles.push(spawn_agent(a, link, rx, s, deadlock_timeout)?);
        }
        let (link, rx) = hub.attach(AgentId::CLIENT);
        Ok(LocalCluster { agents, client: Client::new(link, rx), handles, hub: Some(hub), tcp: Vec::new() })
    }

    /// `n` agents, each with its own TCP listener on localhost.
    pub fn tcp(n: u64, s: &Scenario, deadlock_timeout: Duration) -> Result<Self, RunError> {
        let agents: Vec<AgentId> = (1..=n).map(AgentId).collect();
        let mut nodes = Vec::new();
        for &a in &agents {
            nodes.push(TcpNode::bind(a, "127.0.0.1:0")?);
        }
        let (client_node, client_rx) = TcpNode::bind(AgentId::CLIENT, "127.0.0.1:0")?;
        for node in nodes.iter().map(|(n, _)| n).chain(std::iter::once(&client_node)) {
            for (&a, (peer, _)) in agents.iter().zip(&nodes) {
                node.set_peer(a, peer.local_addr());
            }
        }
        let mut handles = Vec::new();
        let mut tcp = vec![client_node.clone()];
        for (&a, (node, rx)) in agents.iter().zip(nodes) {
            tcp.push(node.clone());
            handles.push(spawn_agent(a, Arc::new(TcpLink(node)), rx, s, deadlock_timeout)?);
        }
        Ok(LocalCluster { agents, client: Client::new(Arc::new(TcpLink(client_node)), client_rx), handles, hub: None, tcp })
    }

    /// Another client on the same agents, for running contexts side by side.
    pub fn extra_client(&mut self, id: AgentId) -> Result<Client, RunError> {
        if let Some(hub) = &self.hub {
            let (link, rx) = hub.attach(id);
            return Ok(Client::new(link, rx));
        }
        let (node, rx) = TcpNode::bind(id, "127.0.0.1:0")?;
        for (&a, peer) in self.agents.iter().zip(&self.tcp[1..]) {
            node.set_peer(a, peer.local_addr());
        }
        self.tcp.push(node.clone());
        Ok(Client::new(Arc::new(TcpLink(node)), rx))
    }

    pub fn run(&self, s: &Scenario, opts: RunOptions) -> Result<RunOutput, RunError> {
        self.client.run(s, &self.agents, opts)
    }

    pub fn shutdown(self) {
        for h in self.handles {
            h.stop();
        }
        for n in self.tcp {
            n.shutdown();
        }
    }
}

fn spawn_agent(
    a: AgentId,
    link: Arc<dyn Link>,
    rx: Receiver<Inbound>,
    s: &Scenario,
    deadlock_timeout: Duration,
) -> Result<AgentHandle, RunError> {
    let source = source_for(&s.metrics).map_err(|e| RunError::ContextCreate(e.to_string()))?;
    let cfg = AgentConfig { id: a, deadlock_timeout };
    Ok(Agent::new(cfg, link, rx, Publisher::new(a, source)).spawn())
}

/// Run `s` on `n` fresh in-process agents (over TCP on localhost when `tcp`).
pub fn run_local(s: &Scenario, n: u64, tcp: bool, opts: RunOptions) -> Result<RunOutput, RunError> {
    let cluster = if tcp {
        LocalCluster::tcp(n, s, opts.deadlock_timeout)?
    } else {
        LocalCluster::in_process(n, s, opts.deadlock_timeout)?
    };
    let out = cluster.run(s, opts);
    cluster.shutdown();
    out
}

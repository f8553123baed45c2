//! Simulation models: the processes a scenario deploys and how they are
//! spread over agents.

mod grid;
mod toy;

pub use grid::{DbLp, Driver, FluidLp, GridLayout, JobRunner, ReplicaMonitor};
pub use toy::{Bouncer, Consumer, Producer};

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::components::job::SimJob;
use crate::components::replica::StateUpdate;
use crate::error::{ModelError, ScenarioError, SyncError};
use crate::event::{EventKind, SimEvent};
use crate::ids::{AgentId, ContextId, LpId};
use crate::lp::{Behavior, DEFAULT_WORKERS};
use crate::scenario::{ModelSpec, Scenario};
use crate::sync::{Engine, EngineConfig, LpFactory, DEFAULT_DEADLOCK_TIMEOUT};
use crate::time::VirtualTime;

/// Event payloads of the built-in models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "msg", rename_all = "snake_case")]
pub enum Msg {
    Tick { n: u64 },
    Ack,
    Arrival,
    Start { job: SimJob },
    FlowRequest { flow: u64, resources: Vec<String>, demand: u64, reply_to: LpId },
    FlowWake { flow: u64, version: u64 },
    FlowDone { flow: u64, served: f64, interrupts: u64 },
    DbWrite { job: u64, object: String, size: u64, reply_to: LpId },
    DbRead { job: u64, object: String, reply_to: LpId },
    DbReply { job: u64, object: String, size: Option<u64> },
    MigrationDone { object: String, tape: String },
    State(StateUpdate),
}

impl Msg {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("payload serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Msg, ModelError> {
        serde_json::from_slice(bytes).map_err(|e| ModelError::Payload(e.to_string()))
    }
}

pub(crate) fn msg_of(e: &SimEvent) -> Result<Msg, ModelError> {
    Msg::decode(&e.payload)
}

/// First id handed to job processes; job `k` runs as `JOB_LP_BASE + k`.
pub const JOB_LP_BASE: u64 = 1_000_000;

pub fn job_lp(job_id: u64) -> LpId {
    LpId(JOB_LP_BASE + job_id)
}

/// An initial event for a static process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seed {
    pub lp: LpId,
    pub at: VirtualTime,
    pub kind: EventKind,
    pub payload: Vec<u8>,
}

/// A scenario compiled into processes.
#[derive(Clone)]
pub struct Model {
    spec: ModelSpec,
    lookahead: VirtualTime,
    grid: Option<Arc<GridLayout>>,
}

impl Model {
    pub fn build(s: &Scenario) -> Result<Model, ScenarioError> {
        s.validate()?;
        let grid = match &s.model {
            ModelSpec::Grid(g) => Some(Arc::new(GridLayout::new(g, s.seed, s.horizon, s.lookahead)?)),
            _ => None,
        };
        Ok(Model { spec: s.model.clone(), lookahead: s.lookahead, grid })
    }

    pub fn grid(&self) -> Option<&Arc<GridLayout>> {
        self.grid.as_ref()
    }

    /// Static processes with the participant slot that hosts each one
    /// (taken modulo the participant count).
    pub fn static_lps(&self) -> Vec<(LpId, usize)> {
        match &self.spec {
            ModelSpec::PingPong { .. } => vec![(toy::PING, 0), (toy::PONG, 1)],
            ModelSpec::Star { consumers, .. } => {
                let mut v = vec![(toy::PRODUCER, 0)];
                v.extend((0..*consumers as usize).map(|i| (toy::consumer(i), i + 1)));
                v
            }
            ModelSpec::Grid(_) => self.grid.as_ref().expect("grid layout").static_lps(),
        }
    }

    pub fn make_behavior(&self, lp: LpId) -> Result<Box<dyn Behavior>, ModelError> {
        match &self.spec {
            ModelSpec::PingPong { rounds, delay } => {
                let peer = if lp == toy::PING { toy::PONG } else { toy::PING };
                Ok(Box::new(Bouncer::new(peer, *rounds, *delay)))
            }
            ModelSpec::Star { consumers, messages, interval } => {
                if lp == toy::PRODUCER {
                    Ok(Box::new(Producer::new(*consumers, *messages, *interval)))
                } else {
                    Ok(Box::new(Consumer))
                }
            }
            ModelSpec::Grid(_) => self.grid.as_ref().expect("grid layout").make_behavior(lp),
        }
    }

    pub fn seeds(&self) -> Vec<Seed> {
        match &self.spec {
            ModelSpec::PingPong { .. } => [toy::PING, toy::PONG]
                .into_iter()
                .map(|lp| Seed { lp, at: VirtualTime::ZERO, kind: EventKind::Generic, payload: Msg::Tick { n: 0 }.encode() })
                .collect(),
            ModelSpec::Star { .. } => vec![Seed {
                lp: toy::PRODUCER,
                at: VirtualTime::ZERO,
                kind: EventKind::Wakeup,
                payload: Msg::Tick { n: 0 }.encode(),
            }],
            ModelSpec::Grid(_) => self.grid.as_ref().expect("grid layout").seeds(),
        }
    }

    /// Processes created on demand by job starts.
    pub fn job_lps(&self) -> Vec<LpId> {
        self.grid.as_ref().map(|g| g.arrivals.iter().map(|a| job_lp(a.job.job_id)).collect()).unwrap_or_default()
    }

    pub fn factory(&self) -> Option<Arc<dyn LpFactory>> {
        self.grid.as_ref().map(|g| Arc::new(JobFactory { layout: g.clone() }) as Arc<dyn LpFactory>)
    }

    pub fn lookahead(&self) -> VirtualTime {
        self.lookahead
    }

    /// Default job placement when no planner is involved: round robin.
    pub fn round_robin_jobs(&self, participants: &[AgentId]) -> BTreeMap<LpId, AgentId> {
        self.job_lps().into_iter().enumerate().map(|(i, lp)| (lp, participants[i % participants.len()])).collect()
    }

    /// Host agent of each static process.
    pub fn static_routes(&self, participants: &[AgentId]) -> BTreeMap<LpId, AgentId> {
        self.static_lps().into_iter().map(|(lp, slot)| (lp, participants[slot % participants.len()])).collect()
    }
}

/// Creates job runners for `START_NEW_JOB` events.
pub struct JobFactory {
    layout: Arc<GridLayout>,
}

impl LpFactory for JobFactory {
    fn create(&self, _lp: LpId, _event: &SimEvent) -> Result<Box<dyn Behavior>, ModelError> {
        Ok(Box::new(JobRunner::new(self.layout.clone())))
    }

    fn job_kind(&self, event: &SimEvent) -> Result<String, ModelError> {
        match msg_of(event)? {
            Msg::Start { .. } => Ok(grid::JOB_KIND.to_string()),
            other => Err(ModelError::Payload(format!("expected a job start, got {other:?}"))),
        }
    }
}

/// Everything an agent needs to host its share of one context.
#[derive(Debug, Clone)]
pub struct EngineSpec {
    pub context: ContextId,
    pub me: AgentId,
    pub participants: Vec<AgentId>,
    pub horizon: VirtualTime,
    pub workers: usize,
    pub deadlock_timeout: Duration,
    /// Job process → host agent.
    pub job_routes: BTreeMap<LpId, AgentId>,
}

impl EngineSpec {
    pub fn new(s: &Scenario, context: ContextId, me: AgentId, participants: Vec<AgentId>) -> Self {
        EngineSpec {
            context,
            me,
            participants,
            horizon: s.horizon,
            workers: s.workers.unwrap_or(DEFAULT_WORKERS),
            deadlock_timeout: DEFAULT_DEADLOCK_TIMEOUT,
            job_routes: BTreeMap::new(),
        }
    }
}

/// Build the engine for `spec.me`, hosting its static processes and seeds.
pub fn build_engine(model: &Model, spec: &EngineSpec) -> Result<Engine, SyncError> {
    let mut engine = Engine::new(EngineConfig {
        context: spec.context,
        me: spec.me,
        participants: spec.participants.clone(),
        lookahead: model.lookahead(),
        horizon: spec.horizon,
        workers: spec.workers,
        deadlock_timeout: spec.deadlock_timeout,
    });
    if let Some(f) = model.factory() {
        engine = engine.with_factory(f);
    }
    let routes = model.static_routes(&spec.participants);
    for (&lp, &host) in &routes {
        if host == spec.me {
            let b = model.make_behavior(lp).map_err(|e| SyncError::Lp(e.into()))?;
            engine.add_lp(lp, b);
        }
    }
    engine.set_routes(routes.clone());
    let jobs = if spec.job_routes.is_empty() { model.round_robin_jobs(&spec.participants) } else { spec.job_routes.clone() };
    engine.set_routes(jobs);
    for s in model.seeds() {
        if routes.get(&s.lp) == Some(&spec.me) {
            engine.seed_event(s.lp, s.at, s.kind, s.payload)?;
        }
    }
    Ok(engine)
}

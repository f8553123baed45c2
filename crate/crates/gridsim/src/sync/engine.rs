//! The per-(agent, context) event scheduler.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{LpError, ModelError, SyncError};
use crate::event::{EventKey, EventKind, SimEvent};
use crate::ids::{AgentId, ContextId, LpId};
use crate::lp::{Behavior, LogicalProcess, LpContext, LpState, WorkerPool};
use crate::queue::peek_min_across;
use crate::results::{ResultRecord, TraceEntry};
use crate::time::VirtualTime;

use super::{SyncMessage, SyncState, SyncStats};

/// Destination of the end-of-run marker; never a real process.
pub const END_OF_RUN_LP: LpId = LpId(u64::MAX);

pub const DEFAULT_DEADLOCK_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub context: ContextId,
    pub me: AgentId,
    pub participants: Vec<AgentId>,
    pub lookahead: VirtualTime,
    pub horizon: VirtualTime,
    pub workers: usize,
    pub deadlock_timeout: Duration,
}

/// Builds processes for jobs that arrive through `START_NEW_JOB` events.
pub trait LpFactory: Send + Sync {
    fn create(&self, lp: LpId, event: &SimEvent) -> Result<Box<dyn Behavior>, ModelError>;

    /// Compatibility class of the process a job needs; idle processes of the
    /// same class are reused.
    fn job_kind(&self, event: &SimEvent) -> Result<String, ModelError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Processed(EventKey),
    Blocked(Vec<AgentId>),
    Idle,
    Finished,
}

pub struct Engine {
    sync: SyncState,
    lps: BTreeMap<LpId, LogicalProcess>,
    aliases: BTreeMap<LpId, LpId>,
    routes: BTreeMap<LpId, AgentId>,
    next_seq: BTreeMap<LpId, u64>,
    last_delivered: BTreeMap<LpId, EventKey>,
    pool: WorkerPool,
    factory: Option<Arc<dyn LpFactory>>,
    trace: Vec<TraceEntry>,
    records: Vec<ResultRecord>,
    lp_states: Vec<(LpId, LpState)>,
    record_lp_states: bool,
    deadlock_timeout: Duration,
    last_progress: Instant,
    blocked: Option<(EventKey, Vec<AgentId>)>,
    pub lps_created: u64,
    pub lps_reused: u64,
    pub dropped_past_horizon: u64,
    episodes: EpisodeStats,
    episode_mark: EpisodeMark,
}

/// Counters at the start of the current blocking episode.
#[derive(Debug, Clone, Copy, Default)]
struct EpisodeMark {
    requests: u64,
    immediate: u64,
    deferred: u64,
    /// Immediate responses still owed for requests of earlier episodes.
    carry: u64,
}

/// Blocking episodes: stretches where the next event stays unsafe. Sync
/// traffic is counted as requests sent plus responses received.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub count: u64,
    pub max_sync: u64,
    pub total_sync: u64,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Self {
        let mut sync = SyncState::new(cfg.context, cfg.me, cfg.participants.iter().copied(), cfg.lookahead, cfg.horizon);
        sync.local_queue
            .enqueue(SimEvent {
                key: EventKey::end_of_run(cfg.horizon),
                context: cfg.context,
                src_lp: END_OF_RUN_LP,
                dst_lp: END_OF_RUN_LP,
                kind: EventKind::EndOfRun,
                payload: Vec::new(),
            })
            .expect("fresh queue");
        Engine {
            sync,
            lps: BTreeMap::new(),
            aliases: BTreeMap::new(),
            routes: BTreeMap::new(),
            next_seq: BTreeMap::new(),
            last_delivered: BTreeMap::new(),
            pool: WorkerPool::new(cfg.workers),
            factory: None,
            trace: Vec::new(),
            records: Vec::new(),
            lp_states: Vec::new(),
            record_lp_states: false,
            deadlock_timeout: cfg.deadlock_timeout,
            last_progress: Instant::now(),
            blocked: None,
            lps_created: 0,
            lps_reused: 0,
            dropped_past_horizon: 0,
            episodes: EpisodeStats::default(),
            episode_mark: EpisodeMark::default(),
        }
    }

    pub fn with_factory(mut self, factory: Arc<dyn LpFactory>) -> Self {
        self.factory = Some(factory);
        self
    }

    /// Keep every LP state change for inspection in tests.
    pub fn record_lp_states(&mut self, on: bool) {
        self.record_lp_states = on;
    }

    pub fn lp_state_log(&self) -> &[(LpId, LpState)] {
        &self.lp_states
    }

    pub fn sync(&self) -> &SyncState {
        &self.sync
    }

    pub fn stats(&self) -> SyncStats {
        self.sync.stats
    }

    pub fn context(&self) -> ContextId {
        self.sync.context()
    }

    pub fn me(&self) -> AgentId {
        self.sync.me()
    }

    pub fn set_routes(&mut self, routes: impl IntoIterator<Item = (LpId, AgentId)>) {
        self.routes.extend(routes);
    }

    pub fn add_lp(&mut self, id: LpId, behavior: Box<dyn Behavior>) {
        self.routes.insert(id, self.sync.me());
        self.lps.insert(id, LogicalProcess::new(id, behavior));
        self.lps_created += 1;
    }

    pub fn lp(&self, id: LpId) -> Option<&LogicalProcess> {
        let slot = self.aliases.get(&id).copied().unwrap_or(id);
        self.lps.get(&slot)
    }

    /// Seed an initial event for a hosted process.
    pub fn seed_event(&mut self, dst: LpId, at: VirtualTime, kind: EventKind, payload: Vec<u8>) -> Result<(), SyncError> {
        let seq = self.bump_seq(dst);
        let e = SimEvent {
            key: EventKey::new(at, dst.0, seq),
            context: self.sync.context(),
            src_lp: dst,
            dst_lp: dst,
            kind,
            payload,
        };
        self.route(e)
    }

    fn bump_seq(&mut self, lp: LpId) -> u64 {
        let s = self.next_seq.entry(lp).or_insert(0);
        let out = *s;
        *s += 1;
        out
    }

    fn hosts(&self, lp: LpId) -> bool {
        self.lps.contains_key(&lp) || self.aliases.contains_key(&lp) || self.routes.get(&lp) == Some(&self.sync.me())
    }

    fn route(&mut self, e: SimEvent) -> Result<(), SyncError> {
        if e.timestamp() > self.sync.horizon() {
            self.dropped_past_horizon += 1;
            return Ok(());
        }
        if self.hosts(e.dst_lp) {
            self.sync
                .local_queue
                .enqueue(e)
                .map_err(|crate::error::QueueError::DuplicateKey(k)| SyncError::Duplicate(k))
        } else {
            let to = *self.routes.get(&e.dst_lp).ok_or(SyncError::NoRoute(e.dst_lp))?;
            self.sync.send_event(to, e);
            Ok(())
        }
    }

    /// Feed one received sync message.
    pub fn deliver(&mut self, m: SyncMessage) -> Result<(), SyncError> {
        let before = self.sync.lvt_table().clone();
        self.sync.on_message(m)?;
        if *self.sync.lvt_table() != before {
            self.last_progress = Instant::now();
        }
        Ok(())
    }

    pub fn take_outbox(&mut self) -> Vec<(AgentId, SyncMessage)> {
        self.sync.take_outbox()
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        std::mem::take(&mut self.trace)
    }

    pub fn take_records(&mut self) -> Vec<ResultRecord> {
        std::mem::take(&mut self.records)
    }

    pub fn is_finished(&self) -> bool {
        self.sync.is_finished()
    }

    pub fn local_clock(&self) -> VirtualTime {
        self.sync.local_clock()
    }

    pub fn held_events(&self) -> usize {
        self.sync.held_count()
    }

    /// One scheduler step.
    pub fn step(&mut self) -> Result<StepOutcome, SyncError> {
        if self.sync.is_finished() {
            return Ok(StepOutcome::Idle);
        }
        let (qi, key) = {
            let queues = std::iter::once(&self.sync.local_queue).chain(self.sync.remote_queues.values());
            match peek_min_across(queues) {
                Some((i, e)) => (i, e.key),
                None => return Ok(StepOutcome::Idle),
            }
        };
        let (safe, violators) = self.sync.is_safe(key.timestamp);
        if !safe {
            let new_episode = self.blocked.as_ref().map(|(k, v)| *k != key || *v != violators).unwrap_or(true);
            if new_episode {
                self.close_episode();
                self.episodes.count += 1;
                self.episode_mark = self.episode_counters();
                self.blocked = Some((key, violators.clone()));
            }
            self.sync.request_bounds(key.timestamp, &violators);
            self.sync.stats.blocked_steps += 1;
            return Ok(StepOutcome::Blocked(violators));
        }
        self.close_episode();
        let event = if qi == 0 {
            self.sync.local_queue.pop()
        } else {
            self.sync.remote_queues.values_mut().nth(qi - 1).and_then(|q| q.pop())
        }
        .expect("peeked");
        if event.timestamp() < self.sync.local_clock() {
            return Err(SyncError::Causality {
                lp: event.dst_lp,
                key: event.key,
                last: EventKey::new(self.sync.local_clock(), 0, 0),
            });
        }
        self.sync.set_clock(event.timestamp());
        self.last_progress = Instant::now();
        if event.kind == EventKind::EndOfRun && event.dst_lp == END_OF_RUN_LP {
            self.finish()?;
            return Ok(StepOutcome::Finished);
        }
        self.dispatch(event)?;
        self.sync.service();
        Ok(StepOutcome::Processed(key))
    }

    fn episode_counters(&self) -> EpisodeMark {
        let st = &self.sync.stats;
        let immediate = st.responses_received - st.deferred_received;
        EpisodeMark { requests: st.requests_sent, immediate, deferred: st.deferred_received, carry: st.requests_sent - immediate }
    }

    /// Requests sent during the episode plus the responses to them. Every
    /// request gets one immediate response, in order, so the first `carry`
    /// immediate responses belong to earlier episodes.
    fn episode_traffic(&self) -> u64 {
        let (m, now) = (self.episode_mark, self.episode_counters());
        (now.requests - m.requests) + (now.immediate - m.immediate).saturating_sub(m.carry) + (now.deferred - m.deferred)
    }

    fn close_episode(&mut self) {
        if self.blocked.take().is_some() {
            let n = self.episode_traffic();
            self.episodes.max_sync = self.episodes.max_sync.max(n);
            self.episodes.total_sync += n;
        }
    }

    pub fn episodes(&self) -> EpisodeStats {
        self.episodes
    }

    /// Run until blocked, idle or finished, at most `budget` events.
    pub fn run_steps(&mut self, budget: usize) -> Result<StepOutcome, SyncError> {
        let mut last = StepOutcome::Idle;
        for _ in 0..budget {
            last = self.step()?;
            if !matches!(last, StepOutcome::Processed(_)) {
                break;
            }
        }
        Ok(last)
    }

    fn set_state(&mut self, slot: LpId, addressed: LpId, target: LpState) -> Result<(), SyncError> {
        let lp = self.lps.get_mut(&slot).ok_or(SyncError::MissingLp(slot))?;
        match lp.transition(target, &mut self.pool) {
            Err(LpError::NoWorker(id)) => {
                self.pool.wait_for_worker(id);
                Err(LpError::NoWorker(id).into())
            }
            r => {
                r?;
                if self.record_lp_states {
                    self.lp_states.push((addressed, target));
                }
                Ok(())
            }
        }
    }

    fn resolve_job(&mut self, event: &SimEvent) -> Result<LpId, SyncError> {
        let addressed = event.dst_lp;
        let factory = self.factory.clone().ok_or(SyncError::MissingLp(addressed))?;
        let lp_err = |e: ModelError| SyncError::Lp(LpError::Model(e));
        let kind = factory.job_kind(event).map_err(lp_err)?;
        let idle = self
            .lps
            .iter()
            .find(|(_, lp)| lp.state() == LpState::Waiting && lp.behavior.is_idle() && lp.behavior.kind() == kind)
            .map(|(id, _)| *id);
        match idle {
            Some(slot) => {
                self.aliases.insert(addressed, slot);
                self.lps_reused += 1;
                Ok(slot)
            }
            None => {
                let behavior = factory.create(addressed, event).map_err(lp_err)?;
                self.add_lp(addressed, behavior);
                Ok(addressed)
            }
        }
    }

    fn dispatch(&mut self, event: SimEvent) -> Result<(), SyncError> {
        let addressed = event.dst_lp;
        let slot = match self.aliases.get(&addressed) {
            Some(s) => *s,
            None if self.lps.contains_key(&addressed) => addressed,
            None if event.kind == EventKind::StartNewJob => self.resolve_job(&event)?,
            None => return Err(SyncError::MissingLp(addressed)),
        };
        if let Some(last) = self.last_delivered.get(&addressed) {
            if *last >= event.key {
                return Err(SyncError::Causality { lp: addressed, key: event.key, last: *last });
            }
        }
        self.last_delivered.insert(addressed, event.key);

        match self.lps[&slot].state() {
            LpState::Created | LpState::Waiting => self.set_state(slot, addressed, LpState::Ready)?,
            _ => {}
        }
        self.set_state(slot, addressed, LpState::Running)?;

        let now = event.timestamp();
        let mut ctx = LpContext::new(addressed, self.sync.context(), now, self.sync.lookahead());
        let lp = self.lps.get_mut(&slot).expect("slot");
        lp.advance_clock(now);
        lp.behavior.handle(&event, &mut ctx)?;
        let done = lp.behavior.is_finished();
        self.set_state(slot, addressed, if done { LpState::Finished } else { LpState::Waiting })?;

        self.trace.push(TraceEntry { key: event.key, lp: addressed, kind: event.kind });
        self.records.extend(ctx.take_records());
        for em in ctx.take_emitted() {
            let seq = self.bump_seq(addressed);
            let e = SimEvent {
                key: EventKey::new(em.at, addressed.0, seq),
                context: self.sync.context(),
                src_lp: addressed,
                dst_lp: em.dst,
                kind: em.kind,
                payload: em.payload,
            };
            self.route(e)?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<(), SyncError> {
        let horizon = self.sync.horizon();
        let ids: Vec<LpId> = self.lps.keys().copied().collect();
        for id in ids {
            let mut ctx = LpContext::new(id, self.sync.context(), horizon, self.sync.lookahead());
            self.lps.get_mut(&id).expect("lp").behavior.on_end(&mut ctx)?;
            self.records.extend(ctx.take_records());
        }
        self.sync.mark_finished();
        Ok(())
    }

    /// Diagnostic when the engine has been blocked with no bound moving for
    /// longer than the configured timeout.
    pub fn detect_deadlock(&self) -> Option<String> {
        self.detect_deadlock_at(Instant::now())
    }

    pub fn detect_deadlock_at(&self, now: Instant) -> Option<String> {
        let (key, on) = self.blocked.as_ref()?;
        if now.duration_since(self.last_progress) < self.deadlock_timeout {
            return None;
        }
        let bounds: Vec<String> = on
            .iter()
            .map(|a| format!("{a}={:?}", self.sync.lvt_table().get(*a).expect("participant")))
            .collect();
        Some(format!(
            "{} blocked at {} on [{}] for {:?} with no bound advancing (lookahead {})",
            self.sync.me(),
            key,
            bounds.join(", "),
            self.deadlock_timeout,
            self.sync.lookahead()
        ))
    }
}

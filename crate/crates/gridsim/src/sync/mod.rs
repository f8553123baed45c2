//! Conservative synchronization with null messages on demand.
//!
//! Each agent keeps, per context, one event queue per remote participant, one
//! for its own processes, and a table of lower bounds on what every remote
//! participant can still send. An event is processed only when every bound
//! lies strictly above its timestamp. When a bound is too low the agent asks
//! that participant for a guarantee, once per blocking episode.
//!
//! Non-job events travelling to a remote agent are held until the sender's own
//! guarantee reaches their timestamp, so each channel carries nondecreasing
//! timestamps and a received timestamp is a valid bound.

mod engine;

pub use engine::{Engine, EpisodeStats, EngineConfig, LpFactory, StepOutcome, DEFAULT_DEADLOCK_TIMEOUT, END_OF_RUN_LP};

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::SyncError;
use crate::event::{EventKind, SimEvent};
use crate::ids::{AgentId, ContextId};
use crate::queue::{peek_min_across, EventQueue};
use crate::time::VirtualTime;

/// What is known about a remote agent's future sends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    Unknown,
    /// The agent will send no further event with a timestamp below this.
    Known(VirtualTime),
}

impl Bound {
    /// Bound as a time, `Unknown` reading as negative infinity.
    pub fn or_min(self) -> VirtualTime {
        match self {
            Bound::Unknown => VirtualTime::from_ticks(i64::MIN),
            Bound::Known(t) => t,
        }
    }

    fn raise(&mut self, t: VirtualTime) -> bool {
        match *self {
            Bound::Known(cur) if cur >= t => false,
            _ => {
                *self = Bound::Known(t);
                true
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LvtTable {
    entries: BTreeMap<AgentId, Bound>,
}

impl LvtTable {
    pub fn new(remotes: impl IntoIterator<Item = AgentId>) -> Self {
        LvtTable { entries: remotes.into_iter().map(|a| (a, Bound::Unknown)).collect() }
    }

    pub fn get(&self, a: AgentId) -> Option<Bound> {
        self.entries.get(&a).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (AgentId, Bound)> + '_ {
        self.entries.iter().map(|(a, b)| (*a, *b))
    }

    /// Monotone max update; returns whether the entry moved.
    pub fn raise(&mut self, a: AgentId, t: VirtualTime) -> bool {
        self.entries.get_mut(&a).map(|b| b.raise(t)).unwrap_or(false)
    }

    pub fn contains(&self, a: AgentId) -> bool {
        self.entries.contains_key(&a)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SyncBody {
    Event { event: SimEvent },
    /// `requester_clock`: the requester sends nothing earlier unless the
    /// responder first sends it something earlier than that minus lookahead.
    /// `received`: how many messages the requester has taken from the
    /// responder, so the responder knows what is still in flight.
    LvtRequest { requester_clock: VirtualTime, threshold: VirtualTime, received: u64 },
    /// `deferred`: sent later, once a held-over request could be met.
    LvtResponse {
        guarantee: VirtualTime,
        #[serde(default)]
        deferred: bool,
    },
    /// One agent's share of a floor round: nothing it sends from now on is
    /// earlier than `floor`. The counts are events sent to and taken from
    /// each peer.
    Floor { epoch: u64, floor: VirtualTime, sent: Vec<(AgentId, u64)>, received: Vec<(AgentId, u64)> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct FloorReport {
    floor: VirtualTime,
    sent: BTreeMap<AgentId, u64>,
    received: BTreeMap<AgentId, u64>,
}

/// A synchronization-layer message between two agents of one context.
///
/// `seq` numbers messages per (sender, receiver, context) so receivers can
/// prove FIFO delivery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncMessage {
    pub context: ContextId,
    pub sender: AgentId,
    pub seq: u64,
    pub body: SyncBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SyncStats {
    pub events_sent: u64,
    pub events_received: u64,
    pub requests_sent: u64,
    pub responses_sent: u64,
    pub deferred_responses: u64,
    pub requests_received: u64,
    pub responses_received: u64,
    #[serde(default)]
    pub deferred_received: u64,
    pub blocked_steps: u64,
    pub floor_reports: u64,
}

impl SyncStats {
    pub fn sync_messages_sent(&self) -> u64 {
        self.requests_sent + self.responses_sent + self.floor_reports
    }
}

/// Per-(agent, context) synchronization state.
#[derive(Debug)]
pub struct SyncState {
    context: ContextId,
    me: AgentId,
    pub(crate) remote_queues: BTreeMap<AgentId, EventQueue>,
    pub(crate) local_queue: EventQueue,
    lvt: LvtTable,
    local_clock: VirtualTime,
    lookahead: VirtualTime,
    horizon: VirtualTime,
    finished: bool,
    pending_requests: BTreeMap<AgentId, VirtualTime>,
    outstanding: BTreeMap<AgentId, (VirtualTime, VirtualTime)>,
    last_request: BTreeMap<AgentId, (VirtualTime, u64)>,
    /// Transport position just past the last event taken from each peer.
    event_mark: BTreeMap<AgentId, u64>,
    events_out: BTreeMap<AgentId, u64>,
    events_in: BTreeMap<AgentId, u64>,
    blocked: bool,
    epoch: u64,
    reports: BTreeMap<AgentId, FloorReport>,
    /// Our report in the last round that agreed, if nothing moved since.
    settled: Option<FloorReport>,
    held: BTreeMap<crate::event::EventKey, AgentId>,
    held_events: BTreeMap<crate::event::EventKey, SimEvent>,
    send_seq: BTreeMap<AgentId, u64>,
    recv_seq: BTreeMap<AgentId, u64>,
    inflight: BTreeMap<AgentId, VecDeque<(u64, VirtualTime)>>,
    promised: VirtualTime,
    outbox: Vec<(AgentId, SyncMessage)>,
    pub stats: SyncStats,
}

impl SyncState {
    pub fn new(
        context: ContextId,
        me: AgentId,
        remotes: impl IntoIterator<Item = AgentId>,
        lookahead: VirtualTime,
        horizon: VirtualTime,
    ) -> Self {
        let remotes: Vec<AgentId> = remotes.into_iter().filter(|a| *a != me).collect();
        SyncState {
            context,
            me,
            remote_queues: remotes.iter().map(|a| (*a, EventQueue::new())).collect(),
            local_queue: EventQueue::new(),
            lvt: LvtTable::new(remotes.iter().copied()),
            local_clock: VirtualTime::ZERO,
            lookahead,
            horizon,
            finished: false,
            pending_requests: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            last_request: BTreeMap::new(),
            event_mark: BTreeMap::new(),
            events_out: remotes.iter().map(|a| (*a, 0)).collect(),
            events_in: remotes.iter().map(|a| (*a, 0)).collect(),
            blocked: false,
            epoch: 0,
            reports: BTreeMap::new(),
            settled: None,
            held: BTreeMap::new(),
            held_events: BTreeMap::new(),
            send_seq: remotes.iter().map(|a| (*a, 0)).collect(),
            recv_seq: remotes.iter().map(|a| (*a, 0)).collect(),
            inflight: remotes.iter().map(|a| (*a, VecDeque::new())).collect(),
            promised: VirtualTime::from_ticks(i64::MIN),
            outbox: Vec::new(),
            stats: SyncStats::default(),
        }
    }

    pub fn context(&self) -> ContextId {
        self.context
    }

    pub fn me(&self) -> AgentId {
        self.me
    }

    pub fn lvt_table(&self) -> &LvtTable {
        &self.lvt
    }

    pub fn local_clock(&self) -> VirtualTime {
        self.local_clock
    }

    pub fn lookahead(&self) -> VirtualTime {
        self.lookahead
    }

    pub fn horizon(&self) -> VirtualTime {
        self.horizon
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn pending_requests(&self) -> &BTreeMap<AgentId, VirtualTime> {
        &self.pending_requests
    }

    pub fn remotes(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.lvt.agents()
    }

    pub fn pending_events(&self) -> usize {
        self.local_queue.len() + self.remote_queues.values().map(EventQueue::len).sum::<usize>()
    }

    pub fn take_outbox(&mut self) -> Vec<(AgentId, SyncMessage)> {
        std::mem::take(&mut self.outbox)
    }

    fn check_participant(&self, sender: AgentId) -> Result<(), SyncError> {
        if self.lvt.contains(sender) {
            Ok(())
        } else {
            Err(SyncError::UnknownSender { context: self.context, sender })
        }
    }

    fn check_message(&mut self, m: &SyncMessage) -> Result<(), SyncError> {
        if m.context != self.context {
            return Err(SyncError::WrongContext { context: self.context, got: m.context });
        }
        self.check_participant(m.sender)?;
        let expected = self.recv_seq.get_mut(&m.sender).expect("participant");
        if m.seq != *expected {
            return Err(SyncError::FifoGap { sender: m.sender, expected: *expected, got: m.seq });
        }
        *expected += 1;
        Ok(())
    }

    fn push(&mut self, to: AgentId, body: SyncBody) {
        let seq = self.send_seq.get_mut(&to).expect("participant");
        if let SyncBody::Event { event } = &body {
            *self.events_out.get_mut(&to).expect("participant") += 1;
            self.inflight.get_mut(&to).expect("participant").push_back((*seq, event.timestamp()));
        }
        let msg = SyncMessage { context: self.context, sender: self.me, seq: *seq, body };
        *seq += 1;
        self.outbox.push((to, msg));
    }

    /// Dispatch any received sync message.
    pub fn on_message(&mut self, m: SyncMessage) -> Result<(), SyncError> {
        match m.body {
            SyncBody::Event { .. } => self.on_event_received(m),
            SyncBody::LvtRequest { .. } => self.on_lvt_request(m),
            SyncBody::LvtResponse { .. } => self.on_lvt_response(m),
            SyncBody::Floor { .. } => self.on_floor(m),
        }
    }

    pub fn on_event_received(&mut self, m: SyncMessage) -> Result<(), SyncError> {
        self.check_message(&m)?;
        let SyncBody::Event { event } = m.body else {
            unreachable!("on_event_received called with a non-event message")
        };
        let ts = event.timestamp();
        if event.kind != EventKind::StartNewJob {
            if let Some(Bound::Known(b)) = self.lvt.get(m.sender) {
                if ts < b {
                    return Err(SyncError::BoundViolation { sender: m.sender, bound: b, got: ts });
                }
            }
            self.lvt.raise(m.sender, ts);
        }
        self.stats.events_received += 1;
        self.event_mark.insert(m.sender, self.recv_seq[&m.sender]);
        *self.events_in.get_mut(&m.sender).expect("participant") += 1;
        self.remote_queues
            .get_mut(&m.sender)
            .expect("participant")
            .enqueue(event)
            .map_err(|crate::error::QueueError::DuplicateKey(k)| SyncError::Duplicate(k))?;
        self.service();
        Ok(())
    }

    pub fn on_lvt_request(&mut self, m: SyncMessage) -> Result<(), SyncError> {
        self.check_message(&m)?;
        let SyncBody::LvtRequest { requester_clock, threshold, received } = m.body else {
            unreachable!("on_lvt_request called with a non-request message")
        };
        self.stats.requests_received += 1;
        self.flush_held();
        let q = self.inflight.get_mut(&m.sender).expect("participant");
        while q.front().map(|(s, _)| *s < received).unwrap_or(false) {
            q.pop_front();
        }
        // Our events the requester has not yet seen can still pull its sends
        // below its clock.
        let unseen = q
            .iter()
            .map(|(_, t)| *t)
            .chain(self.held_events.values().filter(|e| self.held.get(&e.key) == Some(&m.sender)).map(|e| e.timestamp()))
            .min();
        let cond = match unseen {
            Some(f) => requester_clock.min(f.saturating_add(self.lookahead)),
            None => requester_clock,
        };
        let x = self.guarantee_given(m.sender, cond);
        self.lvt.raise(m.sender, cond.min(x.saturating_add(self.lookahead)));
        self.flush_held();
        let g = self.compute_guarantee();
        self.respond(m.sender, g, false);
        if g < threshold {
            self.pending_requests.insert(m.sender, threshold);
        } else {
            self.pending_requests.remove(&m.sender);
        }
        self.service();
        Ok(())
    }

    pub fn on_lvt_response(&mut self, m: SyncMessage) -> Result<(), SyncError> {
        self.check_message(&m)?;
        let SyncBody::LvtResponse { guarantee, deferred } = m.body else {
            unreachable!("on_lvt_response called with a non-response message")
        };
        self.stats.responses_received += 1;
        if deferred {
            self.stats.deferred_received += 1;
        }
        self.outstanding.remove(&m.sender);
        self.lvt.raise(m.sender, guarantee);
        self.service();
        Ok(())
    }

    fn respond(&mut self, to: AgentId, g: VirtualTime, deferred: bool) {
        debug_assert!(g >= self.promised, "guarantee went back: {g} < {}", self.promised);
        self.promised = self.promised.max(g);
        self.stats.responses_sent += 1;
        self.push(to, SyncBody::LvtResponse { guarantee: g, deferred });
    }

    /// Lower bound on the timestamp of anything this agent will still send:
    /// the earliest unprocessed event or remote bound, plus lookahead. A
    /// finished agent sends nothing more.
    pub fn compute_guarantee(&self) -> VirtualTime {
        self.earliest_cause(None).saturating_add(self.lookahead)
    }

    /// Earliest timestamp this agent may still process: pending events and
    /// remote bounds, optionally ignoring one remote.
    fn earliest_cause(&self, except: Option<AgentId>) -> VirtualTime {
        if self.finished {
            return VirtualTime::MAX;
        }
        let pending = peek_min_across(std::iter::once(&self.local_queue).chain(self.remote_queues.values()))
            .map(|(_, e)| e.timestamp())
            .unwrap_or(self.horizon);
        let inputs = self
            .lvt
            .iter()
            .filter(|(a, _)| Some(*a) != except)
            .map(|(_, b)| match b {
                Bound::Unknown => VirtualTime::ZERO,
                Bound::Known(t) => t,
            })
            .min()
            .unwrap_or(VirtualTime::MAX);
        pending.min(inputs)
    }

    /// Guarantee assuming `from` sends nothing below `cond` unless we first
    /// send it something below `cond` minus lookahead.
    fn guarantee_given(&self, from: AgentId, cond: VirtualTime) -> VirtualTime {
        let own = match self.lvt.get(from) {
            Some(Bound::Known(b)) => b.max(cond),
            _ => cond.max(VirtualTime::ZERO),
        };
        self.earliest_cause(Some(from)).min(own).saturating_add(self.lookahead)
    }

    /// Clock offered to `to` in a request: our sends to it stay at or above
    /// this unless `to` itself sends us something earlier.
    fn conditional_clock(&self, to: AgentId) -> VirtualTime {
        let held = self.held_events.values().filter(|e| self.held.get(&e.key) == Some(&to)).map(|e| e.timestamp()).min();
        let c = self.earliest_cause(Some(to)).saturating_add(self.lookahead);
        held.map(|h| h.min(c)).unwrap_or(c)
    }

    /// Whether `ts` can be processed, and which remote agents block it.
    pub fn is_safe(&self, ts: VirtualTime) -> (bool, Vec<AgentId>) {
        let violators: Vec<AgentId> = self
            .lvt
            .iter()
            .filter(|(_, b)| match b {
                Bound::Unknown => true,
                Bound::Known(t) => *t <= ts,
            })
            .map(|(a, _)| a)
            .collect();
        (violators.is_empty(), violators)
    }

    /// Ask each violator for a guarantee above `ts`, unless a request is
    /// already in flight or the same request was answered already.
    pub(crate) fn request_bounds(&mut self, ts: VirtualTime, violators: &[AgentId]) -> usize {
        self.flush_held();
        self.blocked = true;
        if self.lvt.len() >= 2 && !self.reports.contains_key(&self.me) {
            let mine = self.floor_report();
            if self.settled.as_ref() != Some(&mine) || !self.reports.is_empty() {
                self.report_floor(mine);
            }
        }
        let threshold = ts.saturating_add(VirtualTime::from_ticks(1));
        let mut sent = 0;
        for &r in violators {
            let clock = self.conditional_clock(r);
            let mark = self.event_mark.get(&r).copied().unwrap_or(0);
            if self.outstanding.contains_key(&r) || self.last_request.get(&r) == Some(&(threshold, mark)) {
                continue;
            }
            self.outstanding.insert(r, (clock, threshold));
            self.last_request.insert(r, (threshold, mark));
            self.stats.requests_sent += 1;
            let received = self.recv_seq[&r];
            self.push(r, SyncBody::LvtRequest { requester_clock: clock, threshold, received });
            sent += 1;
        }
        sent
    }

    /// Queue an event for a remote agent. Job starts go out at once; other
    /// events wait until the channel order allows them.
    pub(crate) fn send_event(&mut self, to: AgentId, event: SimEvent) {
        if event.kind == EventKind::StartNewJob {
            self.stats.events_sent += 1;
            self.push(to, SyncBody::Event { event });
        } else {
            self.held.insert(event.key, to);
            self.held_events.insert(event.key, event);
        }
    }

    fn flush_held(&mut self) {
        let g = self.compute_guarantee();
        while let Some((&key, _)) = self.held.first_key_value() {
            if key.timestamp > g {
                break;
            }
            let to = self.held.remove(&key).expect("present");
            let event = self.held_events.remove(&key).expect("present");
            self.stats.events_sent += 1;
            self.push(to, SyncBody::Event { event });
        }
    }

    /// Release held events and answer deferred requests that are now met.
    pub(crate) fn service(&mut self) {
        self.flush_held();
        if self.pending_requests.is_empty() {
            return;
        }
        let g = self.compute_guarantee();
        let ready: Vec<AgentId> = self.pending_requests.iter().filter(|(_, thr)| g >= **thr).map(|(a, _)| *a).collect();
        for a in ready {
            self.pending_requests.remove(&a);
            self.stats.deferred_responses += 1;
            self.respond(a, g, true);
        }
    }

    pub(crate) fn held_count(&self) -> usize {
        self.held.len()
    }

    pub(crate) fn set_clock(&mut self, t: VirtualTime) {
        self.local_clock = t;
        self.blocked = false;
    }

    pub(crate) fn mark_finished(&mut self) {
        self.finished = true;
        self.service();
        if !self.reports.is_empty() && !self.reports.contains_key(&self.me) {
            let mine = self.floor_report();
            self.report_floor(mine);
        }
    }

    /// Earliest timestamp of anything this agent can still send, ignoring
    /// remote bounds.
    fn floor_report(&self) -> FloorReport {
        let floor = if self.finished {
            VirtualTime::MAX
        } else {
            let pending = peek_min_across(std::iter::once(&self.local_queue).chain(self.remote_queues.values()))
                .map(|(_, e)| e.timestamp())
                .unwrap_or(self.horizon)
                .saturating_add(self.lookahead);
            self.held.keys().next().map(|k| k.timestamp.min(pending)).unwrap_or(pending)
        };
        FloorReport { floor, sent: self.events_out.clone(), received: self.events_in.clone() }
    }

    fn report_floor(&mut self, mine: FloorReport) {
        let peers: Vec<AgentId> = self.lvt.agents().collect();
        for p in peers {
            self.stats.floor_reports += 1;
            let body = SyncBody::Floor {
                epoch: self.epoch,
                floor: mine.floor,
                sent: mine.sent.iter().map(|(a, n)| (*a, *n)).collect(),
                received: mine.received.iter().map(|(a, n)| (*a, *n)).collect(),
            };
            self.push(p, body);
        }
        self.reports.insert(self.me, mine);
        self.close_round();
    }

    pub fn on_floor(&mut self, m: SyncMessage) -> Result<(), SyncError> {
        self.check_message(&m)?;
        let SyncBody::Floor { epoch, floor, sent, received } = m.body else {
            unreachable!("on_floor called with a non-floor message")
        };
        if epoch < self.epoch {
            return Ok(());
        }
        if epoch > self.epoch {
            self.epoch = epoch;
            self.reports.clear();
        }
        let report = FloorReport { floor, sent: sent.into_iter().collect(), received: received.into_iter().collect() };
        self.reports.insert(m.sender, report);
        if !self.reports.contains_key(&self.me) && (self.blocked || self.finished) {
            let mine = self.floor_report();
            self.report_floor(mine);
        } else {
            self.close_round();
        }
        Ok(())
    }

    /// With every report in, raise all bounds to the smallest floor, provided
    /// no event was in flight between any pair when they reported.
    fn close_round(&mut self) {
        if self.reports.len() < self.lvt.len() + 1 {
            return;
        }
        let reports = std::mem::take(&mut self.reports);
        self.epoch += 1;
        let agreed = reports.iter().all(|(a, ra)| {
            ra.sent.iter().all(|(b, n)| reports.get(b).map(|rb| rb.received.get(a) == Some(n)).unwrap_or(false))
        });
        if !agreed {
            self.settled = None;
            return;
        }
        let low = reports.values().map(|r| r.floor).min().expect("non-empty");
        self.settled = reports.get(&self.me).cloned();
        let peers: Vec<AgentId> = self.lvt.agents().collect();
        for p in peers {
            self.lvt.raise(p, low);
        }
        self.service();
    }
}

#[cfg(test)]
mod tests;

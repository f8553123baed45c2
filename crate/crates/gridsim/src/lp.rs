//! Logical processes, their lifecycle, and the worker pool.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::LpError;
use crate::event::{EventKind, SimEvent};
use crate::ids::{ContextId, LpId};
use crate::results::ResultRecord;
use crate::time::VirtualTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LpState {
    Created,
    Ready,
    Running,
    Waiting,
    Finished,
}

impl LpState {
    pub fn can_move_to(self, target: LpState) -> bool {
        use LpState::*;
        matches!(
            (self, target),
            (Created, Ready) | (Ready, Running) | (Running, Waiting) | (Running, Finished) | (Waiting, Ready)
        )
    }
}

pub type WorkerId = usize;

pub const DEFAULT_WORKERS: usize = 4;

/// Fixed set of worker slots with a FIFO admission queue for processes that
/// could not get one.
#[derive(Debug, Clone)]
pub struct WorkerPool {
    free: VecDeque<WorkerId>,
    admission: VecDeque<LpId>,
    size: usize,
}

impl WorkerPool {
    pub fn new(size: usize) -> Self {
        WorkerPool { free: (0..size).collect(), admission: VecDeque::new(), size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn available(&self) -> usize {
        self.free.len()
    }

    fn acquire(&mut self) -> Option<WorkerId> {
        self.free.pop_front()
    }

    fn release(&mut self, w: WorkerId) {
        self.free.push_back(w);
    }

    pub fn wait_for_worker(&mut self, lp: LpId) {
        if !self.admission.contains(&lp) {
            self.admission.push_back(lp);
        }
    }

    /// Next process waiting for a worker, if any worker is free.
    pub fn next_admission(&mut self) -> Option<LpId> {
        if self.free.is_empty() {
            None
        } else {
            self.admission.pop_front()
        }
    }
}

impl Default for WorkerPool {
    fn default() -> Self {
        WorkerPool::new(DEFAULT_WORKERS)
    }
}

/// An event requested by a behavior; the engine assigns its key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emission {
    pub dst: LpId,
    pub at: VirtualTime,
    pub kind: EventKind,
    pub payload: Vec<u8>,
}

/// What a behavior sees while handling one event.
pub struct LpContext {
    lp: LpId,
    context: ContextId,
    now: VirtualTime,
    lookahead: VirtualTime,
    pub(crate) emitted: Vec<Emission>,
    pub(crate) records: Vec<ResultRecord>,
}

impl LpContext {
    pub fn new(lp: LpId, context: ContextId, now: VirtualTime, lookahead: VirtualTime) -> Self {
        LpContext { lp, context, now, lookahead, emitted: Vec::new(), records: Vec::new() }
    }

    pub fn lp(&self) -> LpId {
        self.lp
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    pub fn lookahead(&self) -> VirtualTime {
        self.lookahead
    }

    /// One tick after `now`.
    pub fn earliest_self(&self) -> VirtualTime {
        self.now.saturating_add(VirtualTime::from_ticks(1))
    }

    /// Earliest time an event to another process may carry.
    pub fn earliest_send(&self) -> Result<VirtualTime, LpError> {
        let la = self.lookahead.max(VirtualTime::from_ticks(1));
        Ok(self.now.checked_add(la)?)
    }

    /// Schedule an event strictly after `now`. Events to
    /// any other process must clear the lookahead window.
    pub fn emit(&mut self, dst: LpId, at: VirtualTime, kind: EventKind, payload: Vec<u8>) -> Result<(), LpError> {
        if at <= self.now {
            return Err(LpError::EmitInPast { lp: self.lp, at, clock: self.now });
        }
        if dst != self.lp {
            let min = self.earliest_send()?;
            if at < min {
                return Err(LpError::LookaheadViolation { lp: self.lp, dst, at, min });
            }
        }
        self.emitted.push(Emission { dst, at, kind, payload });
        Ok(())
    }

    /// Send after the minimum allowed delay.
    pub fn send(&mut self, dst: LpId, kind: EventKind, payload: Vec<u8>) -> Result<(), LpError> {
        let at = self.earliest_send()?;
        self.emit(dst, at, kind, payload)
    }

    pub fn record(&mut self, metric: &str, value: f64, tags: &[(&str, &str)]) {
        self.records.push(ResultRecord::new(self.context, metric, self.now, value, tags));
    }

    pub fn take_emitted(&mut self) -> Vec<Emission> {
        std::mem::take(&mut self.emitted)
    }

    pub fn take_records(&mut self) -> Vec<ResultRecord> {
        std::mem::take(&mut self.records)
    }
}

/// Model code run by a logical process.
pub trait Behavior: Send {
    /// Compatibility class used when reusing an idle process for a new job.
    fn kind(&self) -> &str;

    fn handle(&mut self, event: &SimEvent, ctx: &mut LpContext) -> Result<(), LpError>;

    /// Called once when the run reaches its horizon; may only record results.
    fn on_end(&mut self, _ctx: &mut LpContext) -> Result<(), LpError> {
        Ok(())
    }

    /// True when the process holds no work and may take a new job.
    fn is_idle(&self) -> bool {
        false
    }

    fn is_finished(&self) -> bool {
        false
    }
}

pub struct LogicalProcess {
    pub id: LpId,
    state: LpState,
    local_clock: VirtualTime,
    worker: Option<WorkerId>,
    pub behavior: Box<dyn Behavior>,
}

impl std::fmt::Debug for LogicalProcess {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogicalProcess")
            .field("id", &self.id)
            .field("state", &self.state)
            .field("local_clock", &self.local_clock)
            .field("worker", &self.worker)
            .field("kind", &self.behavior.kind())
            .finish()
    }
}

impl LogicalProcess {
    pub fn new(id: LpId, behavior: Box<dyn Behavior>) -> Self {
        LogicalProcess { id, state: LpState::Created, local_clock: VirtualTime::ZERO, worker: None, behavior }
    }

    pub fn state(&self) -> LpState {
        self.state
    }

    pub fn local_clock(&self) -> VirtualTime {
        self.local_clock
    }

    pub fn worker(&self) -> Option<WorkerId> {
        self.worker
    }

    /// Move to `target`. Entering READY binds a worker; WAITING and FINISHED
    /// hand it back.
    pub fn transition(&mut self, target: LpState, pool: &mut WorkerPool) -> Result<(), LpError> {
        if !self.state.can_move_to(target) {
            return Err(LpError::IllegalTransition { lp: self.id, from: self.state, to: target });
        }
        if target == LpState::Ready {
            let w = pool.acquire().ok_or(LpError::NoWorker(self.id))?;
            self.worker = Some(w);
        }
        if matches!(target, LpState::Waiting | LpState::Finished) {
            if let Some(w) = self.worker.take() {
                pool.release(w);
            }
        }
        self.state = target;
        Ok(())
    }

    pub(crate) fn advance_clock(&mut self, t: VirtualTime) {
        debug_assert!(t >= self.local_clock);
        self.local_clock = t;
    }
}

/// Functional form of [`LogicalProcess::transition`].
pub fn lp_transition(mut lp: LogicalProcess, target: LpState, pool: &mut WorkerPool) -> Result<LogicalProcess, LpError> {
    lp.transition(target, pool)?;
    Ok(lp)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Nop;
    impl Behavior for Nop {
        fn kind(&self) -> &str {
            "nop"
        }
        fn handle(&mut self, _: &SimEvent, _: &mut LpContext) -> Result<(), LpError> {
            Ok(())
        }
    }

    fn lp() -> LogicalProcess {
        LogicalProcess::new(LpId(1), Box::new(Nop))
    }

    #[test]
    fn created_to_ready_binds_worker() {
        let mut pool = WorkerPool::new(2);
        let p = lp_transition(lp(), LpState::Ready, &mut pool).unwrap();
        assert_eq!(p.state(), LpState::Ready);
        assert!(p.worker().is_some());
        assert_eq!(pool.available(), 1);
    }

    #[test]
    fn waiting_and_finished_release_worker() {
        let mut pool = WorkerPool::new(1);
        let mut p = lp();
        p.transition(LpState::Ready, &mut pool).unwrap();
        p.transition(LpState::Running, &mut pool).unwrap();
        p.transition(LpState::Waiting, &mut pool).unwrap();
        assert_eq!(pool.available(), 1);
        p.transition(LpState::Ready, &mut pool).unwrap();
        p.transition(LpState::Running, &mut pool).unwrap();
        p.transition(LpState::Finished, &mut pool).unwrap();
        assert_eq!(pool.available(), 1);
        assert!(p.worker().is_none());
    }

    #[test]
    fn illegal_transition_rejected() {
        let mut pool = WorkerPool::new(1);
        let mut p = lp();
        p.transition(LpState::Ready, &mut pool).unwrap();
        assert!(matches!(
            p.transition(LpState::Finished, &mut pool),
            Err(LpError::IllegalTransition { from: LpState::Ready, to: LpState::Finished, .. })
        ));
    }

    #[test]
    fn no_free_worker_keeps_created() {
        let mut pool = WorkerPool::new(0);
        let mut p = lp();
        assert!(matches!(p.transition(LpState::Ready, &mut pool), Err(LpError::NoWorker(_))));
        assert_eq!(p.state(), LpState::Created);
    }

    #[test]
    fn legal_set_is_exactly_five_edges() {
        use LpState::*;
        let all = [Created, Ready, Running, Waiting, Finished];
        let n = all.iter().flat_map(|a| all.iter().map(move |b| (a, b))).filter(|(a, b)| a.can_move_to(**b)).count();
        assert_eq!(n, 5);
    }

    #[test]
    fn emit_checks_causality_and_lookahead() {
        let mut ctx = LpContext::new(LpId(1), ContextId(1), VirtualTime::from_ticks(10), VirtualTime::from_ticks(2));
        assert!(ctx.emit(LpId(1), VirtualTime::from_ticks(11), EventKind::Wakeup, vec![]).is_ok());
        assert!(matches!(
            ctx.emit(LpId(1), VirtualTime::from_ticks(10), EventKind::Wakeup, vec![]),
            Err(LpError::EmitInPast { .. })
        ));
        assert!(matches!(
            ctx.emit(LpId(2), VirtualTime::from_ticks(11), EventKind::Generic, vec![]),
            Err(LpError::LookaheadViolation { .. })
        ));
        assert!(ctx.emit(LpId(2), VirtualTime::from_ticks(12), EventKind::Generic, vec![]).is_ok());
    }
}

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use super::*;
use crate::error::LpError;
use crate::event::EventKey;
use crate::ids::LpId;
use crate::lp::{Behavior, LpContext};
use crate::results::TraceEntry;

const A: AgentId = AgentId(1);
const B: AgentId = AgentId(2);
const C: AgentId = AgentId(3);

fn vt(t: i64) -> VirtualTime {
    VirtualTime::from_ticks(t)
}

fn state(remotes: &[AgentId], la: i64) -> SyncState {
    SyncState::new(ContextId(7), A, remotes.iter().copied(), vt(la), vt(1_000_000))
}

fn ev(ts: i64, src: u64, kind: EventKind) -> SimEvent {
    SimEvent {
        key: EventKey::new(vt(ts), src, 0),
        context: ContextId(7),
        src_lp: LpId(src),
        dst_lp: LpId(src),
        kind,
        payload: vec![],
    }
}

struct Feed {
    seq: BTreeMap<AgentId, u64>,
}

impl Feed {
    fn new() -> Self {
        Feed { seq: BTreeMap::new() }
    }

    fn msg(&mut self, from: AgentId, body: SyncBody) -> SyncMessage {
        let s = self.seq.entry(from).or_insert(0);
        let m = SyncMessage { context: ContextId(7), sender: from, seq: *s, body };
        *s += 1;
        m
    }
}

fn responses(s: &mut SyncState) -> Vec<(AgentId, VirtualTime)> {
    s.take_outbox()
        .into_iter()
        .filter_map(|(to, m)| match m.body {
            SyncBody::LvtResponse { guarantee, .. } => Some((to, guarantee)),
            _ => None,
        })
        .collect()
}

#[test]
fn request_already_met_answers_once() {
    let mut s = state(&[B], 1);
    s.local_queue.enqueue(ev(9, 1, EventKind::Generic)).unwrap();
    let mut f = Feed::new();
    s.on_message(f.msg(B, SyncBody::LvtRequest { requester_clock: vt(12), threshold: vt(8), received: 0 })).unwrap();
    assert_eq!(responses(&mut s), vec![(B, vt(10))]);
    assert!(s.pending_requests().is_empty());
}

#[test]
fn request_below_threshold_answers_now_and_later() {
    let mut s = state(&[B], 1);
    s.local_queue.enqueue(ev(5, 1, EventKind::Generic)).unwrap();
    let mut f = Feed::new();
    s.on_message(f.msg(B, SyncBody::LvtRequest { requester_clock: vt(12), threshold: vt(8), received: 0 })).unwrap();
    assert_eq!(responses(&mut s), vec![(B, vt(6))]);
    assert_eq!(s.pending_requests().get(&B), Some(&vt(8)));
    s.local_queue.pop();
    s.set_clock(vt(5));
    s.service();
    assert_eq!(responses(&mut s), vec![(B, vt(8))]);
    assert_eq!(s.stats.deferred_responses, 1);
    assert!(s.pending_requests().is_empty());
}

#[test]
fn bounds_are_monotone_max() {
    let mut s = state(&[B, C], 1);
    let mut f = Feed::new();
    s.on_message(f.msg(B, SyncBody::LvtResponse { guarantee: vt(7), deferred: false })).unwrap();
    s.on_message(f.msg(B, SyncBody::LvtRequest { requester_clock: vt(2), threshold: vt(3), received: 0 })).unwrap();
    assert_eq!(s.lvt_table().get(B), Some(Bound::Known(vt(7))));

    assert_eq!(s.lvt_table().get(C), Some(Bound::Unknown));
    s.on_message(f.msg(C, SyncBody::LvtResponse { guarantee: vt(0), deferred: false })).unwrap();
    assert_eq!(s.lvt_table().get(C), Some(Bound::Known(vt(0))));
    s.on_message(f.msg(C, SyncBody::LvtResponse { guarantee: vt(11), deferred: false })).unwrap();
    s.on_message(f.msg(C, SyncBody::LvtResponse { guarantee: vt(4), deferred: false })).unwrap();
    assert_eq!(s.lvt_table().get(C), Some(Bound::Known(vt(11))));
}

#[test]
fn guarantee_examples() {
    let mut s = state(&[], 1);
    assert_eq!(s.compute_guarantee(), vt(1_000_001));
    s.local_queue.enqueue(ev(14, 1, EventKind::Generic)).unwrap();
    assert_eq!(s.compute_guarantee(), vt(15));
    let mut z = state(&[], 0);
    z.local_queue.enqueue(ev(14, 1, EventKind::Generic)).unwrap();
    assert_eq!(z.compute_guarantee(), vt(14));
    z.mark_finished();
    assert_eq!(z.compute_guarantee(), VirtualTime::MAX);
}

#[test]
fn guarantee_limited_by_unknown_input() {
    let mut s = state(&[B], 1);
    s.local_queue.enqueue(ev(14, 1, EventKind::Generic)).unwrap();
    assert_eq!(s.compute_guarantee(), vt(1));
}

#[test]
fn safety_needs_bounds_strictly_above() {
    let mut s = state(&[B, C], 1);
    let mut f = Feed::new();
    assert_eq!(s.is_safe(vt(10)), (false, vec![B, C]));
    s.on_message(f.msg(B, SyncBody::LvtResponse { guarantee: vt(12), deferred: false })).unwrap();
    s.on_message(f.msg(C, SyncBody::LvtResponse { guarantee: vt(9), deferred: false })).unwrap();
    assert_eq!(s.is_safe(vt(10)), (false, vec![C]));
    s.on_message(f.msg(C, SyncBody::LvtResponse { guarantee: vt(10), deferred: false })).unwrap();
    // A bound equal to the timestamp still admits a same-time event.
    assert_eq!(s.is_safe(vt(10)), (false, vec![C]));
    s.on_message(f.msg(C, SyncBody::LvtResponse { guarantee: vt(11), deferred: false })).unwrap();
    assert_eq!(s.is_safe(vt(10)), (true, vec![]));
}

#[test]
fn one_request_per_episode() {
    let mut s = state(&[B], 1);
    assert_eq!(s.request_bounds(vt(10), &[B]), 1);
    assert_eq!(s.request_bounds(vt(10), &[B]), 0);
    let mut f = Feed::new();
    s.on_message(f.msg(B, SyncBody::LvtResponse { guarantee: vt(3), deferred: false })).unwrap();
    // Nothing changed on our side, so there is nothing new to ask.
    assert_eq!(s.request_bounds(vt(10), &[B]), 0);
    // A new local event alone is no reason: B still owes the deferred answer.
    s.local_queue.enqueue(ev(4, 1, EventKind::Generic)).unwrap();
    assert_eq!(s.request_bounds(vt(10), &[B]), 0);
    // An event from B may have been sent after B read our request: ask again.
    s.on_message(f.msg(B, SyncBody::Event { event: ev(5, 9, EventKind::Generic) })).unwrap();
    assert_eq!(s.request_bounds(vt(10), &[B]), 1);
    // So does a later candidate.
    s.on_message(f.msg(B, SyncBody::LvtResponse { guarantee: vt(6), deferred: false })).unwrap();
    assert_eq!(s.request_bounds(vt(11), &[B]), 1);
    assert_eq!(s.stats.requests_sent, 3);
}

#[test]
fn protocol_errors() {
    let mut s = state(&[B], 1);
    let mut f = Feed::new();
    let m = f.msg(C, SyncBody::LvtResponse { guarantee: vt(1), deferred: false });
    assert!(matches!(s.on_message(m), Err(SyncError::UnknownSender { .. })));
    let mut m = f.msg(B, SyncBody::LvtResponse { guarantee: vt(1), deferred: false });
    m.seq = 3;
    assert!(matches!(s.on_message(m), Err(SyncError::FifoGap { expected: 0, got: 3, .. })));
    let mut m = f.msg(B, SyncBody::LvtResponse { guarantee: vt(1), deferred: false });
    m.context = ContextId(8);
    assert!(matches!(s.on_message(m), Err(SyncError::WrongContext { .. })));

    let mut s = state(&[B], 1);
    let mut f = Feed::new();
    s.on_message(f.msg(B, SyncBody::LvtResponse { guarantee: vt(20), deferred: false })).unwrap();
    let m = f.msg(B, SyncBody::Event { event: ev(15, 5, EventKind::Generic) });
    assert!(matches!(s.on_message(m), Err(SyncError::BoundViolation { .. })));
}

#[test]
fn job_starts_skip_bounds_and_holding() {
    let mut s = state(&[B], 1);
    let mut f = Feed::new();
    s.on_message(f.msg(B, SyncBody::LvtResponse { guarantee: vt(20), deferred: false })).unwrap();
    s.on_message(f.msg(B, SyncBody::Event { event: ev(15, 5, EventKind::StartNewJob) })).unwrap();
    assert_eq!(s.lvt_table().get(B), Some(Bound::Known(vt(20))));

    s.send_event(B, ev(30, 1, EventKind::StartNewJob));
    s.send_event(B, ev(30, 2, EventKind::Generic));
    let sent: Vec<_> = s.take_outbox();
    assert_eq!(sent.len(), 1);
    assert_eq!(s.held_count(), 1);
}

#[test]
fn held_events_leave_in_order_once_guaranteed() {
    let mut s = state(&[B], 3);
    let mut f = Feed::new();
    s.local_queue.enqueue(ev(10, 1, EventKind::Generic)).unwrap();
    s.on_message(f.msg(B, SyncBody::LvtResponse { guarantee: vt(100), deferred: false })).unwrap();
    s.send_event(B, ev(20, 1, EventKind::Generic));
    s.send_event(B, ev(15, 1, EventKind::Generic));
    s.service();
    assert_eq!(s.held_count(), 2);
    s.local_queue.pop();
    s.set_clock(vt(10));
    s.service();
    let stamps: Vec<i64> = s
        .take_outbox()
        .into_iter()
        .filter_map(|(_, m)| match m.body {
            SyncBody::Event { event } => Some(event.timestamp().ticks()),
            _ => None,
        })
        .collect();
    assert_eq!(stamps, vec![15, 20]);
}

#[test]
fn request_flushes_held_before_promising() {
    let mut s = state(&[B], 1);
    let mut f = Feed::new();
    s.on_message(f.msg(B, SyncBody::LvtResponse { guarantee: vt(50), deferred: false })).unwrap();
    s.send_event(B, ev(8, 1, EventKind::Generic));
    s.request_bounds(vt(60), &[B]);
    let bodies: Vec<SyncBody> = s.take_outbox().into_iter().map(|(_, m)| m.body).collect();
    assert!(matches!(bodies[0], SyncBody::Event { .. }));
    assert!(matches!(bodies[1], SyncBody::LvtRequest { .. }));
}

/// Bounces a counter between two processes.
struct Bouncer {
    peer: LpId,
    delay: i64,
    rounds: u64,
}

impl Behavior for Bouncer {
    fn kind(&self) -> &str {
        "bouncer"
    }

    fn handle(&mut self, e: &SimEvent, ctx: &mut LpContext) -> Result<(), LpError> {
        let n = e.payload.first().copied().unwrap_or(0) as u64;
        if n < self.rounds {
            ctx.emit(self.peer, ctx.now().saturating_add(vt(self.delay)), EventKind::Generic, vec![n as u8 + 1])?;
        }
        Ok(())
    }
}

fn engine(me: AgentId, parts: &[AgentId], la: i64) -> Engine {
    Engine::new(EngineConfig {
        context: ContextId(7),
        me,
        participants: parts.to_vec(),
        lookahead: vt(la),
        horizon: vt(10_000),
        workers: 4,
        deadlock_timeout: Duration::from_millis(200),
    })
}

fn bouncers(engines: &mut [Engine], la: i64, rounds: u64) {
    let (a, b) = (LpId(10), LpId(20));
    let host_b = engines.len() - 1;
    engines[0].add_lp(a, Box::new(Bouncer { peer: b, delay: la.max(3), rounds }));
    engines[host_b].add_lp(b, Box::new(Bouncer { peer: a, delay: la.max(3), rounds }));
    let (ha, hb) = (engines[0].me(), engines[host_b].me());
    for e in engines.iter_mut() {
        e.set_routes([(a, ha), (b, hb)]);
    }
    engines[0].seed_event(a, vt(0), EventKind::Generic, vec![0]).unwrap();
    engines[host_b].seed_event(b, vt(1), EventKind::Generic, vec![0]).unwrap();
}

/// Steps every engine round-robin, delivering messages in between, until all
/// finish or nothing moves for `stall` rounds.
fn pump(engines: &mut [Engine], stall: usize) -> bool {
    let mut quiet = 0;
    while !engines.iter().all(Engine::is_finished) {
        let mut moved = false;
        for i in 0..engines.len() {
            if matches!(engines[i].run_steps(50).unwrap(), StepOutcome::Processed(_) | StepOutcome::Finished) {
                moved = true;
            }
            for (to, m) in engines[i].take_outbox() {
                moved = true;
                let j = engines.iter().position(|e| e.me() == to).unwrap();
                engines[j].deliver(m).unwrap();
            }
        }
        quiet = if moved { 0 } else { quiet + 1 };
        if quiet > stall {
            return false;
        }
    }
    true
}

fn merged_trace(engines: &mut [Engine]) -> Vec<TraceEntry> {
    let mut t: Vec<TraceEntry> = engines.iter_mut().flat_map(|e| e.take_trace()).collect();
    t.sort();
    t
}

#[test]
fn two_agent_ping_pong_matches_single_agent() {
    let mut solo = vec![engine(A, &[A], 1)];
    bouncers(&mut solo, 1, 40);
    assert!(pump(&mut solo, 10));
    let want = merged_trace(&mut solo);
    assert_eq!(want.len(), 82);
    assert_eq!(solo[0].stats().sync_messages_sent(), 0);

    let mut pair = vec![engine(A, &[A, B], 1), engine(B, &[A, B], 1)];
    bouncers(&mut pair, 1, 40);
    assert!(pump(&mut pair, 10));
    assert_eq!(merged_trace(&mut pair), want);
}

#[test]
fn zero_lookahead_cycle_deadlocks_and_one_tick_does_not() {
    let mut pair = vec![engine(A, &[A, B], 0), engine(B, &[A, B], 0)];
    bouncers(&mut pair, 0, 40);
    assert!(!pump(&mut pair, 20));
    assert!(pair.iter().all(|e| e.detect_deadlock().is_none()), "timeout not yet reached");
    let later = Instant::now() + Duration::from_secs(1);
    let diag: Vec<String> = pair.iter().filter_map(|e| e.detect_deadlock_at(later)).collect();
    assert!(!diag.is_empty());
    assert!(diag[0].contains("blocked"), "{}", diag[0]);

    let mut pair = vec![engine(A, &[A, B], 1), engine(B, &[A, B], 1)];
    bouncers(&mut pair, 1, 40);
    assert!(pump(&mut pair, 20));
    let later = Instant::now() + Duration::from_secs(1);
    assert!(pair.iter().all(|e| e.detect_deadlock_at(later).is_none()));
}

#[test]
fn idle_engine_reports_no_deadlock() {
    let mut e = engine(A, &[A, B], 1);
    e.run_steps(10).unwrap();
    // Blocked on B for END_OF_RUN, but that is a real wait, so check idle.
    let solo = engine(A, &[A], 1);
    assert!(solo.detect_deadlock_at(Instant::now() + Duration::from_secs(10)).is_none());
}

fn floor_msg(f: &mut Feed, from: AgentId, floor: i64, sent_to_a: u64) -> SyncMessage {
    f.msg(from, SyncBody::Floor { epoch: 0, floor: vt(floor), sent: vec![(A, sent_to_a)], received: vec![(A, 0)] })
}

#[test]
fn floor_round_raises_all_bounds_to_smallest_floor() {
    let mut s = state(&[B, C], 1);
    s.local_queue.enqueue(ev(50, 1, EventKind::Generic)).unwrap();
    s.request_bounds(vt(50), &[B, C]);
    let floors = s.take_outbox().into_iter().filter(|(_, m)| matches!(m.body, SyncBody::Floor { .. })).count();
    assert_eq!(floors, 2);
    let mut f = Feed::new();
    s.on_message(floor_msg(&mut f, B, 80, 0)).unwrap();
    assert_eq!(s.lvt_table().get(B), Some(Bound::Unknown));
    s.on_message(floor_msg(&mut f, C, 60, 0)).unwrap();
    assert_eq!(s.lvt_table().get(B), Some(Bound::Known(vt(51))));
    assert_eq!(s.lvt_table().get(C), Some(Bound::Known(vt(51))));
    assert!(s.is_safe(vt(50)).0);
}

#[test]
fn floor_round_with_event_in_flight_changes_nothing() {
    let mut s = state(&[B, C], 1);
    s.local_queue.enqueue(ev(50, 1, EventKind::Generic)).unwrap();
    s.request_bounds(vt(50), &[B, C]);
    let mut f = Feed::new();
    s.on_message(floor_msg(&mut f, B, 80, 1)).unwrap();
    s.on_message(floor_msg(&mut f, C, 60, 0)).unwrap();
    assert_eq!(s.lvt_table().get(B), Some(Bound::Unknown));
    assert!(!s.is_safe(vt(50)).0);
}

#[test]
fn two_agents_never_start_a_floor_round() {
    let mut s = state(&[B], 1);
    s.local_queue.enqueue(ev(50, 1, EventKind::Generic)).unwrap();
    s.request_bounds(vt(50), &[B]);
    assert!(s.take_outbox().iter().all(|(_, m)| !matches!(m.body, SyncBody::Floor { .. })));
}

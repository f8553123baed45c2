//! Single-queue reference executor.
//!
//! Runs every process of a model from one global event list with no
//! synchronization, no worker pool and no process reuse. Distributed runs
//! must reproduce its trace exactly.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use crate::error::{LpError, ModelError};
use crate::event::{EventKey, EventKind, SimEvent};
use crate::ids::{ContextId, LpId};
use crate::lp::{Behavior, LpContext};
use crate::model::Model;
use crate::results::{ResultRecord, TraceEntry};
use crate::time::VirtualTime;

#[derive(Debug, Default)]
pub struct SequentialRun {
    pub trace: Vec<TraceEntry>,
    pub records: Vec<ResultRecord>,
}

pub fn run_sequential(model: &Model, context: ContextId, horizon: VirtualTime) -> Result<SequentialRun, LpError> {
    let mut lps: BTreeMap<LpId, Box<dyn Behavior>> = BTreeMap::new();
    for (id, _) in model.static_lps() {
        lps.insert(id, model.make_behavior(id)?);
    }
    let factory = model.factory();
    let mut seq: BTreeMap<LpId, u64> = BTreeMap::new();
    let mut next = |lp: LpId| {
        let s = seq.entry(lp).or_insert(0);
        *s += 1;
        *s - 1
    };
    let mut queue: BTreeMap<EventKey, SimEvent> = BTreeMap::new();
    for s in model.seeds() {
        let key = EventKey::new(s.at, s.lp.0, next(s.lp));
        if s.at <= horizon {
            queue.insert(key, SimEvent { key, context, src_lp: s.lp, dst_lp: s.lp, kind: s.kind, payload: s.payload });
        }
    }
    let mut out = SequentialRun::default();
    while let Some((_, e)) = queue.pop_first() {
        let dst = e.dst_lp;
        if let Entry::Vacant(slot) = lps.entry(dst) {
            let f = match (&factory, e.kind) {
                (Some(f), EventKind::StartNewJob) => f,
                _ => return Err(ModelError::UnknownResource(format!("no process {dst}")).into()),
            };
            slot.insert(f.create(dst, &e)?);
        }
        let mut ctx = LpContext::new(dst, context, e.timestamp(), model.lookahead());
        lps.get_mut(&dst).expect("present").handle(&e, &mut ctx)?;
        out.trace.push(TraceEntry { key: e.key, lp: dst, kind: e.kind });
        out.records.extend(ctx.take_records());
        for em in ctx.take_emitted() {
            let key = EventKey::new(em.at, dst.0, next(dst));
            if em.at <= horizon {
                queue.insert(key, SimEvent { key, context, src_lp: dst, dst_lp: em.dst, kind: em.kind, payload: em.payload });
            }
        }
    }
    for (id, b) in lps.iter_mut() {
        let mut ctx = LpContext::new(*id, context, horizon, model.lookahead());
        b.on_end(&mut ctx)?;
        out.records.extend(ctx.take_records());
    }
    Ok(out)
}

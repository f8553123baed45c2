//! Min-ordered event queues.

use std::collections::BTreeMap;

use crate::error::QueueError;
use crate::event::{EventKey, SimEvent};

/// Events ordered by [`EventKey`], smallest first.
#[derive(Debug, Clone, Default)]
pub struct EventQueue {
    events: BTreeMap<EventKey, SimEvent>,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, e: SimEvent) -> Result<(), QueueError> {
        if self.events.contains_key(&e.key) {
            return Err(QueueError::DuplicateKey(e.key));
        }
        self.events.insert(e.key, e);
        Ok(())
    }

    pub fn peek(&self) -> Option<&SimEvent> {
        self.events.values().next()
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.events.pop_first().map(|(_, e)| e)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SimEvent> {
        self.events.values()
    }
}

/// The globally smallest event across `queues`, with the index of the queue
/// holding it.
pub fn peek_min_across<'a, I>(queues: I) -> Option<(usize, &'a SimEvent)>
where
    I: IntoIterator<Item = &'a EventQueue>,
{
    queues
        .into_iter()
        .enumerate()
        .filter_map(|(i, q)| q.peek().map(|e| (i, e)))
        .min_by_key(|(_, e)| e.key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::EventKind;
    use crate::ids::{ContextId, LpId};
    use crate::time::VirtualTime;
    use proptest::prelude::*;

    fn ev(ts: i64, src: u64) -> SimEvent {
        SimEvent {
            key: EventKey::new(VirtualTime::from_ticks(ts), src, 0),
            context: ContextId(1),
            src_lp: LpId(src),
            dst_lp: LpId(0),
            kind: EventKind::Generic,
            payload: Vec::new(),
        }
    }

    fn queue(ts: &[i64]) -> EventQueue {
        let mut q = EventQueue::new();
        for &t in ts {
            q.enqueue(ev(t, 1)).unwrap();
        }
        q
    }

    #[test]
    fn enqueue_keeps_min() {
        let mut q = queue(&[3, 9]);
        q.enqueue(ev(7, 1)).unwrap();
        assert_eq!(q.peek().unwrap().timestamp().ticks(), 3);
        q.enqueue(ev(1, 1)).unwrap();
        assert_eq!(q.peek().unwrap().timestamp().ticks(), 1);
    }

    #[test]
    fn duplicate_key_rejected() {
        let mut q = queue(&[3]);
        assert!(matches!(q.enqueue(ev(3, 1)), Err(QueueError::DuplicateKey(_))));
    }

    #[test]
    fn min_across_queues() {
        let qs = [queue(&[4]), queue(&[2]), queue(&[])];
        let (i, e) = peek_min_across(&qs).unwrap();
        assert_eq!((i, e.timestamp().ticks()), (1, 2));
        let empty = [EventQueue::new(), EventQueue::new()];
        assert!(peek_min_across(&empty).is_none());
    }

    #[test]
    fn min_across_tie_breaks_on_source() {
        let mut a = EventQueue::new();
        a.enqueue(ev(4, 1)).unwrap();
        let mut c = EventQueue::new();
        c.enqueue(ev(4, 3)).unwrap();
        let qs = [a, EventQueue::new(), c];
        let (i, e) = peek_min_across(&qs).unwrap();
        assert_eq!((i, e.key.source), (0, 1));
    }

    proptest! {
        #[test]
        fn pops_are_sorted(ts in proptest::collection::btree_set(0i64..10_000, 0..200)) {
            let mut q = EventQueue::new();
            for &t in ts.iter().rev() {
                q.enqueue(ev(t, 1)).unwrap();
            }
            let mut last = None;
            while let Some(e) = q.pop() {
                if let Some(l) = last {
                    prop_assert!(l < e.key);
                }
                last = Some(e.key);
            }
        }
    }
}

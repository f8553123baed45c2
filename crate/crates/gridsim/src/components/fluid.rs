//! Equal-share fluid model for CPUs and network links.
//!
//! Every active flow crosses one or more resources. A resource divides its
//! capacity equally among the flows crossing it and a flow runs at the
//! smallest share along its path. Whenever a flow joins or leaves, every
//! flow's remaining demand is brought up to date and its completion instant
//! recomputed; completions that move are superseded (an interrupt).
//!
//! Remaining demand is tracked in micro-units (units x 10^6) so that a rate in
//! units per second is exactly micro-units per tick.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::time::VirtualTime;

pub const MICRO: u128 = 1_000_000;
/// Internal accounting unit: a millionth of a micro-unit, so truncation at
/// each recompute stays far below one tick of service.
const FINE: u128 = MICRO * 1_000_000;
/// Fine units delivered per tick at one unit per second.
const FINE_PER_TICK: u128 = FINE / 1_000_000;

pub type FlowId = u64;

/// A rational rate in units per second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub num: u128,
    pub den: u128,
}

impl Rate {
    fn less_than(self, other: Rate) -> bool {
        self.num * other.den < other.num * self.den
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Debug, Clone)]
pub struct FluidResource {
    pub id: String,
    /// Units per simulated second.
    pub capacity: u64,
    active: BTreeSet<FlowId>,
    delivered: u128,
}

impl FluidResource {
    /// Micro-units delivered through this resource so far.
    pub fn delivered_micro(&self) -> u128 {
        (self.delivered + FINE / MICRO / 2) / (FINE / MICRO)
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }
}

#[derive(Debug, Clone)]
pub struct Flow {
    pub id: FlowId,
    pub path: Vec<usize>,
    pub demand: u64,
    remaining: u128,
    rate: Rate,
    pub completion: VirtualTime,
    /// Bumped on every reschedule; completion events carry it so superseded
    /// ones can be recognized.
    pub version: u64,
    pub interrupts: u64,
    pub started: VirtualTime,
}

impl Flow {
    pub fn remaining_micro(&self) -> u128 {
        self.remaining / (FINE / MICRO)
    }

    pub fn rate(&self) -> Rate {
        self.rate
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShareChange {
    Join { id: FlowId, path: Vec<usize>, demand: u64 },
    Leave { id: FlowId },
}

/// A completion instant to (re)schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reschedule {
    pub flow: FlowId,
    pub at: VirtualTime,
    pub version: u64,
}

/// A flow that left, with how much it was actually served.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completed {
    pub flow: FlowId,
    pub demand: u64,
    pub served_micro: u128,
    pub interrupts: u64,
    pub started: VirtualTime,
}

#[derive(Debug, Clone, Default)]
pub struct FluidModel {
    resources: Vec<FluidResource>,
    index: HashMap<String, usize>,
    flows: BTreeMap<FlowId, Flow>,
    last: VirtualTime,
    pub interrupts: u64,
}

impl FluidModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_resource(&mut self, id: &str, capacity: u64) -> Result<usize, ModelError> {
        if self.index.contains_key(id) {
            return Err(ModelError::DuplicateComponent(id.to_string()));
        }
        if capacity == 0 {
            return Err(ModelError::ZeroDemand);
        }
        let i = self.resources.len();
        self.resources.push(FluidResource { id: id.to_string(), capacity, active: BTreeSet::new(), delivered: 0 });
        self.index.insert(id.to_string(), i);
        Ok(i)
    }

    pub fn resource_index(&self, id: &str) -> Result<usize, ModelError> {
        self.index.get(id).copied().ok_or_else(|| ModelError::UnknownResource(id.to_string()))
    }

    pub fn resources(&self) -> &[FluidResource] {
        &self.resources
    }

    pub fn flow(&self, id: FlowId) -> Option<&Flow> {
        self.flows.get(&id)
    }

    pub fn active_flows(&self) -> usize {
        self.flows.len()
    }

    pub fn last_recompute(&self) -> VirtualTime {
        self.last
    }

    fn advance(&mut self, now: VirtualTime) -> Result<(), ModelError> {
        if now < self.last {
            return Err(ModelError::TimeWentBack { now, last: self.last });
        }
        let dt = (now - self.last).ticks() as u128;
        if dt > 0 {
            for f in self.flows.values_mut() {
                let done = (dt.saturating_mul(f.rate.num).saturating_mul(FINE_PER_TICK) / f.rate.den).min(f.remaining);
                f.remaining -= done;
                for &r in &f.path {
                    self.resources[r].delivered += done;
                }
            }
        }
        self.last = now;
        Ok(())
    }

    fn rate_of(&self, path: &[usize]) -> Rate {
        path.iter()
            .map(|&r| Rate { num: self.resources[r].capacity as u128, den: self.resources[r].active.len().max(1) as u128 })
            .reduce(|a, b| if b.less_than(a) { b } else { a })
            .expect("nonempty path")
    }

    /// Apply a membership change at `now` and return every completion that
    /// must be (re)scheduled. A `Leave` also reports what the flow received.
    pub fn share_recompute(&mut self, now: VirtualTime, change: ShareChange) -> Result<(Vec<Reschedule>, Option<Completed>), ModelError> {
        if now < self.last {
            return Err(ModelError::TimeWentBack { now, last: self.last });
        }
        match &change {
            ShareChange::Join { id, path, demand } => {
                if self.flows.contains_key(id) {
                    return Err(ModelError::DuplicateJob(*id));
                }
                if path.is_empty() {
                    return Err(ModelError::EmptyChain);
                }
                if *demand == 0 {
                    return Err(ModelError::ZeroDemand);
                }
                if let Some(&bad) = path.iter().find(|&&r| r >= self.resources.len()) {
                    return Err(ModelError::UnknownResource(format!("#{bad}")));
                }
            }
            ShareChange::Leave { id } => {
                if !self.flows.contains_key(id) {
                    return Err(ModelError::UnknownJob(*id));
                }
            }
        }
        self.advance(now)?;
        let mut completed = None;
        match change {
            ShareChange::Join { id, path, demand } => {
                for &r in &path {
                    self.resources[r].active.insert(id);
                }
                self.flows.insert(
                    id,
                    Flow {
                        id,
                        path,
                        demand,
                        remaining: demand as u128 * FINE,
                        rate: Rate { num: 1, den: 1 },
                        completion: VirtualTime::MAX,
                        version: 0,
                        interrupts: 0,
                        started: now,
                    },
                );
            }
            ShareChange::Leave { id } => {
                let f = self.flows.remove(&id).expect("checked");
                for &r in &f.path {
                    self.resources[r].active.remove(&id);
                }
                completed = Some(Completed {
                    flow: id,
                    demand: f.demand,
                    served_micro: (f.demand as u128 * FINE - f.remaining + FINE / MICRO / 2) / (FINE / MICRO),
                    interrupts: f.interrupts,
                    started: f.started,
                });
            }
        }
        let mut out = Vec::new();
        let ids: Vec<FlowId> = self.flows.keys().copied().collect();
        for id in ids {
            let rate = self.rate_of(&self.flows[&id].path);
            let f = self.flows.get_mut(&id).expect("flow");
            if f.version > 0 && !rate.less_than(f.rate) && !f.rate.less_than(rate) {
                // Same share as before: the scheduled completion stands.
                continue;
            }
            f.rate = rate;
            // round half up
            let per_tick = rate.num * FINE_PER_TICK;
            let dt = (2 * f.remaining * rate.den + per_tick) / (2 * per_tick);
            let at = now.saturating_add(VirtualTime::from_ticks(dt.min(i64::MAX as u128) as i64));
            if at != f.completion {
                if f.version > 0 {
                    f.interrupts += 1;
                    self.interrupts += 1;
                }
                f.version += 1;
                f.completion = at;
                out.push(Reschedule { flow: id, at, version: f.version });
            }
        }
        Ok((out, completed))
    }

    /// Start a flow across the named resources.
    pub fn submit(&mut self, now: VirtualTime, id: FlowId, chain: &[&str], demand: u64) -> Result<Vec<Reschedule>, ModelError> {
        if chain.is_empty() {
            return Err(ModelError::EmptyChain);
        }
        let path = chain.iter().map(|c| self.resource_index(c)).collect::<Result<Vec<_>, _>>()?;
        Ok(self.share_recompute(now, ShareChange::Join { id, path, demand })?.0)
    }

    /// Whether `version` is still the live completion of `flow`.
    pub fn is_current(&self, flow: FlowId, version: u64) -> bool {
        self.flows.get(&flow).map(|f| f.version == version).unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: f64) -> VirtualTime {
        VirtualTime::from_ticks((s * 1e6).round() as i64)
    }

    /// Drive a model to completion, firing completions as they come due.
    fn run(model: &mut FluidModel, arrivals: &[(f64, FlowId, Vec<&str>, u64)]) -> BTreeMap<FlowId, VirtualTime> {
        let mut done = BTreeMap::new();
        let mut pending: BTreeMap<FlowId, (VirtualTime, u64)> = BTreeMap::new();
        let mut arrivals: Vec<_> = arrivals.to_vec();
        arrivals.reverse();
        loop {
            let next_done = pending.iter().map(|(f, (at, v))| (*at, *f, *v)).min();
            let next_arr = arrivals.last().map(|a| t(a.0));
            match (next_done, next_arr) {
                (None, None) => break,
                (Some((at, f, v)), arr) if arr.map(|a| at <= a).unwrap_or(true) => {
                    pending.remove(&f);
                    assert!(model.is_current(f, v));
                    let (rs, c) = model.share_recompute(at, ShareChange::Leave { id: f }).unwrap();
                    assert!(c.is_some());
                    done.insert(f, at);
                    for r in rs {
                        pending.insert(r.flow, (r.at, r.version));
                    }
                }
                _ => {
                    let (s, id, chain, demand) = arrivals.pop().unwrap();
                    for r in model.submit(t(s), id, &chain, demand).unwrap() {
                        pending.insert(r.flow, (r.at, r.version));
                    }
                }
            }
        }
        done
    }

    #[test]
    fn single_job_no_interrupts() {
        let mut m = FluidModel::new();
        m.add_resource("l", 100_000_000).unwrap();
        let done = run(&mut m, &[(0.0, 1, vec!["l"], 100_000_000)]);
        assert_eq!(done[&1], t(1.0));
        assert_eq!(m.interrupts, 0);
    }

    #[test]
    fn second_transfer_interrupts_first() {
        let mut m = FluidModel::new();
        m.add_resource("l", 100_000_000).unwrap();
        let done = run(&mut m, &[(0.0, 1, vec!["l"], 100_000_000), (0.5, 2, vec!["l"], 100_000_000)]);
        assert_eq!(done[&1], t(1.5));
        assert_eq!(done[&2], t(2.0));
        assert!(m.interrupts >= 1);
    }

    #[test]
    fn cpu_sharing_example() {
        let mut m = FluidModel::new();
        m.add_resource("cpu", 10).unwrap();
        let done = run(&mut m, &[(0.0, 1, vec!["cpu"], 10), (0.5, 2, vec!["cpu"], 10)]);
        assert_eq!(done[&1], t(1.5));
        assert_eq!(done[&2], t(2.0));
    }

    #[test]
    fn join_elsewhere_keeps_completion() {
        let mut m = FluidModel::new();
        m.add_resource("a", 100).unwrap();
        m.add_resource("b", 100).unwrap();
        let first = m.submit(VirtualTime::ZERO, 1, &["a"], 100).unwrap();
        let later = m.submit(t(0.25), 2, &["b"], 100).unwrap();
        assert_eq!(later.iter().map(|r| r.flow).collect::<Vec<_>>(), vec![2]);
        assert!(m.is_current(1, first[0].version));
        assert_eq!(m.flow(1).unwrap().completion, t(1.0));
        assert_eq!(m.interrupts, 0);
    }

    #[test]
    fn bottleneck_rate() {
        let mut m = FluidModel::new();
        m.add_resource("fast", 100_000_000).unwrap();
        m.add_resource("slow", 40_000_000).unwrap();
        m.add_resource("other", 100_000_000).unwrap();
        m.submit(VirtualTime::ZERO, 1, &["fast", "slow"], 50_000_000).unwrap();
        assert_eq!(m.flow(1).unwrap().rate().as_f64(), 40e6);
        m.submit(VirtualTime::ZERO, 2, &["other", "slow"], 50_000_000).unwrap();
        assert_eq!(m.flow(1).unwrap().rate().as_f64(), 20e6);
        assert_eq!(m.flow(2).unwrap().rate().as_f64(), 20e6);
    }

    #[test]
    fn single_link_half_second() {
        let mut m = FluidModel::new();
        m.add_resource("l", 100_000_000).unwrap();
        let done = run(&mut m, &[(0.0, 1, vec!["l"], 50_000_000)]);
        assert_eq!(done[&1], t(0.5));
    }

    #[test]
    fn errors() {
        let mut m = FluidModel::new();
        m.add_resource("l", 10).unwrap();
        assert!(matches!(m.submit(VirtualTime::ZERO, 1, &[], 5), Err(ModelError::EmptyChain)));
        assert!(matches!(m.submit(VirtualTime::ZERO, 1, &["x"], 5), Err(ModelError::UnknownResource(_))));
        assert!(matches!(
            m.share_recompute(VirtualTime::ZERO, ShareChange::Leave { id: 9 }),
            Err(ModelError::UnknownJob(9))
        ));
        m.submit(VirtualTime::from_ticks(10), 1, &["l"], 5).unwrap();
        assert!(matches!(m.submit(VirtualTime::from_ticks(5), 2, &["l"], 5), Err(ModelError::TimeWentBack { .. })));
    }
}

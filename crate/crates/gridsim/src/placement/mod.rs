//! Load-aware job placement.
//!
//! Every agent publishes a scalar performance value (lower is better). To
//! place a job, the agents form a complete graph whose edge weights are the
//! mean of the two endpoint values; after all-pairs shortest paths, each
//! vertex is scored by the mean distance to the agents already taking part
//! in the run, and the lowest score wins.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::PlacementError;
use crate::event::{EventKey, EventKind, SimEvent};
use crate::ids::{AgentId, ContextId, LpId};

pub const DEFAULT_WEIGHTS: [f64; 4] = [0.25, 0.25, 0.25, 0.25];
pub const DEFAULT_PERF_TTL: Duration = Duration::from_secs(30);

/// Relative tolerance under which two scores count as tied.
const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfSample {
    pub cpu_load_norm: f64,
    pub mem_used_frac: f64,
    pub net_load_norm: f64,
    pub lp_count: u64,
    pub lp_capacity: u64,
    #[serde(default)]
    pub components_cached: BTreeSet<String>,
}

impl PerfSample {
    pub fn idle() -> Self {
        PerfSample {
            cpu_load_norm: 0.0,
            mem_used_frac: 0.0,
            net_load_norm: 0.0,
            lp_count: 0,
            lp_capacity: 1,
            components_cached: BTreeSet::new(),
        }
    }

    pub fn saturated() -> Self {
        PerfSample { cpu_load_norm: 1.0, mem_used_frac: 1.0, net_load_norm: 1.0, lp_count: 1, ..Self::idle() }
    }

    /// Copy with normalized fields clamped to [0, 1] and a nonzero capacity.
    pub fn clamped(&self) -> Self {
        let c = |x: f64| if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
        PerfSample {
            cpu_load_norm: c(self.cpu_load_norm),
            mem_used_frac: c(self.mem_used_frac),
            net_load_norm: c(self.net_load_norm),
            lp_count: self.lp_count,
            lp_capacity: self.lp_capacity.max(1),
            components_cached: self.components_cached.clone(),
        }
    }

    pub fn lp_ratio(&self) -> f64 {
        (self.lp_count as f64 / self.lp_capacity.max(1) as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfValue {
    pub agent: AgentId,
    pub value: f64,
    /// Wall-clock milliseconds since the Unix epoch.
    pub sampled_at_ms: u64,
    #[serde(default)]
    pub stale: bool,
}

impl PerfValue {
    pub fn is_fresh(&self, now_ms: u64, ttl: Duration) -> bool {
        now_ms.saturating_sub(self.sampled_at_ms) <= ttl.as_millis() as u64
    }
}

pub fn validate_weights(w: [f64; 4]) -> Result<(), PlacementError> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(PlacementError::InvalidWeights(w));
    }
    Ok(())
}

/// Weighted sum of cpu, memory, process-count and network load.
pub fn performance_value(s: &PerfSample, weights: [f64; 4]) -> Result<f64, PlacementError> {
    validate_weights(weights)?;
    let s = s.clamped();
    let v = weights[0] * s.cpu_load_norm + weights[1] * s.mem_used_frac + weights[2] * s.lp_ratio() + weights[3] * s.net_load_norm;
    Ok(v.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementGraph {
    pub vertices: Vec<AgentId>,
    pub values: Vec<f64>,
    pub weight: Vec<Vec<f64>>,
    pub dist: Vec<Vec<f64>>,
}

impl PlacementGraph {
    pub fn index_of(&self, a: AgentId) -> Option<usize> {
        self.vertices.iter().position(|v| *v == a)
    }

    pub fn dist_between(&self, a: AgentId, b: AgentId) -> Option<f64> {
        Some(self.dist[self.index_of(a)?][self.index_of(b)?])
    }
}

pub fn build_graph(values: &[PerfValue]) -> Result<PlacementGraph, PlacementError> {
    build_graph_with_rtt(values, &BTreeMap::new(), 0.0)
}

/// Like [`build_graph`], optionally adding `rtt_weight * rtt_norm(i, j)` to
/// each edge. Off (weight 0) by default.
pub fn build_graph_with_rtt(
    values: &[PerfValue],
    rtt_norm: &BTreeMap<(AgentId, AgentId), f64>,
    rtt_weight: f64,
) -> Result<PlacementGraph, PlacementError> {
    if values.is_empty() {
        return Err(PlacementError::NoFreshValues);
    }
    let mut sorted: Vec<&PerfValue> = values.iter().collect();
    sorted.sort_by_key(|v| v.agent);
    sorted.dedup_by_key(|v| v.agent);
    if let Some(bad) = sorted.iter().find(|v| !v.value.is_finite() || v.value < 0.0) {
        return Err(PlacementError::NonFinite(bad.agent));
    }
    let vertices: Vec<AgentId> = sorted.iter().map(|v| v.agent).collect();
    let p: Vec<f64> = sorted.iter().map(|v| v.value).collect();
    let n = p.len();
    let mut weight = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let (a, b) = (vertices[i].min(vertices[j]), vertices[i].max(vertices[j]));
                let rtt = rtt_norm.get(&(a, b)).copied().unwrap_or(0.0);
                weight[i][j] = (p[i] + p[j]) / 2.0 + rtt_weight * rtt;
            }
        }
    }
    let mut dist = weight.clone();
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = dist[i][k] + dist[k][j];
                if via < dist[i][j] {
                    dist[i][j] = via;
                }
            }
        }
    }
    Ok(PlacementGraph { vertices, values: p, weight, dist })
}

/// Score every vertex against the run's current participants.
pub fn scores(g: &PlacementGraph, participating: &BTreeSet<AgentId>) -> Vec<(AgentId, f64)> {
    (0..g.vertices.len())
        .map(|i| {
            let remaining: Vec<f64> = (0..g.vertices.len())
                .filter(|&j| j != i && participating.contains(&g.vertices[j]))
                .map(|j| g.dist[i][j])
                .collect();
            let s = if remaining.is_empty() {
                g.values[i]
            } else {
                remaining.iter().sum::<f64>() / remaining.len() as f64
            };
            (g.vertices[i], s)
        })
        .collect()
}

fn score_cmp(a: &(AgentId, f64), b: &(AgentId, f64)) -> std::cmp::Ordering {
    let scale = a.1.abs().max(b.1.abs()).max(1e-300);
    if (a.1 - b.1).abs() <= TIE_EPS * scale {
        a.0.cmp(&b.0)
    } else {
        a.1.partial_cmp(&b.1).expect("finite scores")
    }
}

/// Vertices from most to least preferred.
pub fn rank(g: &PlacementGraph, participating: &BTreeSet<AgentId>) -> Vec<(AgentId, f64)> {
    let mut s = scores(g, participating);
    s.sort_by(score_cmp);
    s
}

pub fn score_and_select(g: &PlacementGraph, participating: &BTreeSet<AgentId>) -> AgentId {
    rank(g, participating)[0].0
}

/// Inputs to one placement decision.
pub struct PlacementRequest<'a> {
    pub context: ContextId,
    pub values: &'a [PerfValue],
    pub participating: &'a BTreeSet<AgentId>,
    pub now_ms: u64,
    pub ttl: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobPlacement {
    pub agent: AgentId,
    pub event: SimEvent,
}

/// Choose an agent for a job and build the `START_NEW_JOB` event for it.
/// Unreachable agents are skipped in rank order.
pub fn place_job(
    req: &PlacementRequest<'_>,
    job_lp: LpId,
    key: EventKey,
    src_lp: LpId,
    payload: Vec<u8>,
    reachable: impl Fn(AgentId) -> bool,
) -> Result<JobPlacement, PlacementError> {
    let fresh: Vec<PerfValue> = req.values.iter().filter(|v| v.is_fresh(req.now_ms, req.ttl)).cloned().collect();
    let g = build_graph(&fresh)?;
    let agent = rank(&g, req.participating)
        .into_iter()
        .map(|(a, _)| a)
        .find(|a| reachable(*a))
        .ok_or(PlacementError::AllUnreachable)?;
    Ok(JobPlacement {
        agent,
        event: SimEvent { key, context: req.context, src_lp, dst_lp: job_lp, kind: EventKind::StartNewJob, payload },
    })
}

/// Placement at planning time when every process's event key is not yet
/// known; only the agent choice.
pub fn choose_agent(
    values: &[PerfValue],
    participating: &BTreeSet<AgentId>,
    reachable: impl Fn(AgentId) -> bool,
) -> Result<AgentId, PlacementError> {
    let g = build_graph(values)?;
    rank(&g, participating)
        .into_iter()
        .map(|(a, _)| a)
        .find(|a| reachable(*a))
        .ok_or(PlacementError::AllUnreachable)
}

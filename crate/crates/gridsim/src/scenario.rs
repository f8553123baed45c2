//! Scenario files: schema, validation and workload expansion.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::job::{JobKind, SimJob};
use crate::components::regional::{
    instantiate_regional_center, t0_t1_template, ComponentKind, ComponentRegistry, LinkSpec, RegionalCenterSpec,
};
use crate::error::{ResultError, ScenarioError};
use crate::results::{sha256_hex, DerivedMetric, ResultPool};
use crate::time::VirtualTime;

pub const DEFAULT_LOOKAHEAD: VirtualTime = VirtualTime::from_ticks(1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub horizon: VirtualTime,
    #[serde(default = "default_lookahead")]
    pub lookahead: VirtualTime,
    #[serde(default)]
    pub participants: Participants,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub metrics: MetricsMode,
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub derived_metrics: Vec<DerivedMetric>,
}

fn default_lookahead() -> VirtualTime {
    DEFAULT_LOOKAHEAD
}

/// `"local:N"` or a list of agent addresses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Participants {
    Local(String),
    Remote(Vec<String>),
}

impl Default for Participants {
    fn default() -> Self {
        Participants::Local("local:1".into())
    }
}

impl Participants {
    /// Agent count for local mode.
    pub fn local_count(&self) -> Option<Result<usize, String>> {
        match self {
            Participants::Local(s) => Some(
                s.strip_prefix("local:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|n| *n > 0)
                    .ok_or_else(|| format!("participants: expected \"local:N\" with N > 0, got {s:?}")),
            ),
            Participants::Remote(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricsMode {
    #[default]
    Synthetic,
    Host,
    Replay(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Two processes bouncing a counter.
    PingPong { rounds: u64, delay: VirtualTime },
    /// One producer broadcasting to consumers, which acknowledge.
    Star { consumers: u32, messages: u64, interval: VirtualTime },
    Grid(GridSpec),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub centers: Vec<RegionalCenterSpec>,
    #[serde(default)]
    pub wan: Vec<LinkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<TemplateSpec>,
    pub workload: Workload,
    #[serde(default)]
    pub initial_placements: Vec<InitialPlacement>,
    /// Directory of an exported run whose final database contents seed
    /// this run. Resolved by the client before deployment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_placements_from: Option<String>,
    /// Mirror database state to one monitor process per center.
    #[serde(default)]
    pub replicas: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub t1: usize,
    /// Bits per second before scaling.
    pub wan_bandwidth: u64,
    #[serde(default = "one")]
    pub bandwidth_scale: f64,
    pub db_capacity: u64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialPlacement {
    pub db: String,
    pub object: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobArrival {
    pub time: VirtualTime,
    pub kind: JobKind,
    pub demand: u64,
    pub resources: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Workload {
    Jobs { jobs: Vec<JobArrival> },
    /// Seeded mix of single-link transfers and processing jobs over the
    /// declared resources.
    Random { count: u64, mean_interarrival: VirtualTime, min_demand: u64, max_demand: u64 },
    /// Each T1 center receives `files` files from T0, one every `interval`,
    /// each stored in its database.
    Replication { files: u64, interval: VirtualTime, file_bits: u64, #[serde(default)] jitter: VirtualTime },
}

impl Default for Workload {
    fn default() -> Self {
        Workload::Jobs { jobs: Vec::new() }
    }
}

/// A job with its arrival instant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrival {
    pub time: VirtualTime,
    pub job: SimJob,
}

/// Components after applying the template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub centers: Vec<RegionalCenterSpec>,
    pub wan: Vec<LinkSpec>,
}

impl GridSpec {
    pub fn topology(&self) -> Topology {
        let mut centers = self.centers.clone();
        let mut wan = self.wan.clone();
        if let Some(t) = &self.template {
            let bw = ((t.wan_bandwidth as f64) * t.bandwidth_scale).round().max(1.0) as u64;
            let tpl = t0_t1_template(t.t1, bw, t.db_capacity);
            centers.extend(tpl.centers);
            wan.extend(tpl.wan);
        }
        Topology { centers, wan }
    }
}

impl Topology {
    pub fn registry(&self) -> (ComponentRegistry, Vec<String>) {
        let mut reg = ComponentRegistry::new();
        let mut errors = Vec::new();
        for c in &self.centers {
            if let Err(e) = instantiate_regional_center(c, &mut reg) {
                errors.push(format!("center {}: {e}", c.name));
            }
        }
        for l in &self.wan {
            if let Err(e) = reg.register(&l.id, ComponentKind::Link, None) {
                errors.push(format!("wan: {e}"));
            }
        }
        (reg, errors)
    }
}

impl Scenario {
    pub fn from_json(bytes: &[u8]) -> Result<Scenario, ScenarioError> {
        serde_json::from_slice(bytes).map_err(|e| ScenarioError::Malformed(e.to_string()))
    }

    /// Parse and validate.
    pub fn parse(bytes: &[u8]) -> Result<Scenario, ScenarioError> {
        let s = Scenario::from_json(bytes)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("scenario serializes")
    }

    /// Hash of the canonical encoding, independent of file formatting.
    pub fn sha256(&self) -> String {
        sha256_hex(&self.to_json())
    }

    /// Collect every problem, not just the first.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut errs = Vec::new();
        if self.horizon <= VirtualTime::ZERO {
            errs.push(format!("horizon must be positive, got {}", self.horizon.ticks()));
        }
        if self.lookahead < VirtualTime::ZERO {
            errs.push("lookahead must not be negative".to_string());
        }
        if let Some(Err(e)) = self.participants.local_count() {
            errs.push(e);
        }
        if let Participants::Remote(list) = &self.participants {
            if list.is_empty() {
                errs.push("participants: empty agent list".to_string());
            }
        }
        if self.workers == Some(0) {
            errs.push("workers must be at least 1".to_string());
        }
        let mut names = BTreeSet::new();
        for d in &self.derived_metrics {
            if d.name.is_empty() || d.from.is_empty() {
                errs.push("derived metric: name and from must be set".to_string());
            } else if d.name == d.from {
                errs.push(format!("derived metric {}: cannot derive from itself", d.name));
            } else if !names.insert(d.name.as_str()) {
                errs.push(format!("derived metric {}: declared twice", d.name));
            }
        }
        match &self.model {
            ModelSpec::PingPong { rounds, delay } => {
                if *rounds == 0 {
                    errs.push("ping_pong: rounds must be positive".to_string());
                }
                if *delay < self.lookahead || *delay <= VirtualTime::ZERO {
                    errs.push("ping_pong: delay must be positive and at least the lookahead".to_string());
                }
            }
            ModelSpec::Star { consumers, messages, interval } => {
                if *consumers == 0 || *messages == 0 {
                    errs.push("star: consumers and messages must be positive".to_string());
                }
                if *interval <= VirtualTime::ZERO || *interval < self.lookahead {
                    errs.push("star: interval must be positive and at least the lookahead".to_string());
                }
            }
            ModelSpec::Grid(g) => self.validate_grid(g, &mut errs),
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(errs))
        }
    }

    fn validate_grid(&self, g: &GridSpec, errs: &mut Vec<String>) {
        if let Some(t) = &g.template {
            if !(t.bandwidth_scale.is_finite() && t.bandwidth_scale > 0.0) {
                errs.push("template: bandwidth_scale must be positive".to_string());
            }
            if t.wan_bandwidth == 0 || t.db_capacity == 0 {
                errs.push("template: wan_bandwidth and db_capacity must be positive".to_string());
            }
        }
        let topo = g.topology();
        let (reg, reg_errs) = topo.registry();
        errs.extend(reg_errs);
        for c in &topo.centers {
            for cpu in &c.cpus {
                if cpu.power == 0 {
                    errs.push(format!("cpu {}: power must be positive", cpu.id));
                }
            }
            for l in &c.links {
                if l.bandwidth == 0 {
                    errs.push(format!("link {}: bandwidth must be positive", l.id));
                }
            }
        }
        for l in &topo.wan {
            if l.bandwidth == 0 {
                errs.push(format!("link {}: bandwidth must be positive", l.id));
            }
        }
        for p in &g.initial_placements {
            if reg.get(&p.db).map(|e| e.kind) != Some(ComponentKind::Db) {
                errs.push(format!("initial placement {}: unknown database {}", p.object, p.db));
            }
        }
        match &g.workload {
            Workload::Jobs { jobs } => {
                for (i, j) in jobs.iter().enumerate() {
                    if j.time < VirtualTime::ZERO || j.time > self.horizon {
                        errs.push(format!("job {i}: arrival {} outside [0, horizon]", j.time.ticks()));
                    }
                    for r in &j.resources {
                        if reg.get(r).is_none() {
                            errs.push(format!("job {i}: unknown resource {r}"));
                        }
                    }
                    if j.resources.iter().all(|r| reg.get(r).is_some()) {
                        if let Err(e) = to_job(i as u64, j).plan(&reg) {
                            errs.push(format!("job {i}: {e}"));
                        }
                    }
                }
            }
            Workload::Random { count, mean_interarrival, min_demand, max_demand } => {
                if *count == 0 || *mean_interarrival <= VirtualTime::ZERO {
                    errs.push("random workload: count and mean_interarrival must be positive".to_string());
                }
                if *min_demand == 0 || min_demand > max_demand {
                    errs.push("random workload: need 0 < min_demand <= max_demand".to_string());
                }
                if reg.ids_of(ComponentKind::Link).is_empty() && reg.ids_of(ComponentKind::Cpu).is_empty() {
                    errs.push("random workload: no links or cpus declared".to_string());
                }
            }
            Workload::Replication { files, interval, file_bits, jitter } => {
                if g.template.is_none() {
                    errs.push("replication workload needs a template".to_string());
                }
                if *files == 0 || *file_bits == 0 || *interval <= VirtualTime::ZERO || *jitter < VirtualTime::ZERO {
                    errs.push("replication workload: files, file_bits and interval must be positive".to_string());
                }
            }
        }
    }

    pub fn grid(&self) -> Option<&GridSpec> {
        match &self.model {
            ModelSpec::Grid(g) => Some(g),
            _ => None,
        }
    }

    /// Load `initial_placements_from` (relative to `base`) into the initial
    /// placements, so the scenario no longer depends on the filesystem.
    pub fn resolve_imports(&mut self, base: &Path) -> Result<(), ResultError> {
        if let ModelSpec::Grid(g) = &mut self.model {
            if let Some(dir) = g.initial_placements_from.take() {
                let pool = ResultPool::import(&base.join(dir))?;
                g.initial_placements.extend(placements_from_pool(&pool));
            }
        }
        Ok(())
    }
}

fn to_job(id: u64, j: &JobArrival) -> SimJob {
    SimJob {
        job_id: id,
        kind: j.kind,
        demand: j.demand,
        resources: j.resources.clone(),
        object: j.object.clone(),
        size: j.size,
    }
}

/// Deterministic job list for a grid scenario, sorted by arrival then id.
pub fn expand_workload(g: &GridSpec, seed: u64, horizon: VirtualTime) -> Vec<Arrival> {
    let mut out = match &g.workload {
        Workload::Jobs { jobs } => {
            jobs.iter().enumerate().map(|(i, j)| Arrival { time: j.time, job: to_job(i as u64, j) }).collect()
        }
        Workload::Random { count, mean_interarrival, min_demand, max_demand } => {
            let (reg, _) = g.topology().registry();
            let links = reg.ids_of(ComponentKind::Link);
            let cpus = reg.ids_of(ComponentKind::Cpu);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = 0i64;
            let mut v = Vec::new();
            for id in 0..*count {
                t += rng.gen_range(1..=2 * mean_interarrival.ticks());
                let demand = rng.gen_range(*min_demand..=*max_demand);
                let use_link = cpus.is_empty() || (!links.is_empty() && rng.gen_bool(0.5));
                let (kind, res) = if use_link {
                    (JobKind::Transfer, links[rng.gen_range(0..links.len())].clone())
                } else {
                    (JobKind::Processing, cpus[rng.gen_range(0..cpus.len())].clone())
                };
                v.push(Arrival {
                    time: VirtualTime::from_ticks(t),
                    job: SimJob { job_id: id, kind, demand, resources: vec![res], object: None, size: None },
                });
            }
            v
        }
        Workload::Replication { files, interval, file_bits, jitter } => {
            let n_t1 = g.template.as_ref().map(|t| t.t1).unwrap_or(0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = Vec::new();
            let mut id = 0;
            for f in 0..*files {
                for i in 1..=n_t1 {
                    let t1 = format!("T1_{i}");
                    let j = if jitter.ticks() > 0 { rng.gen_range(0..=jitter.ticks()) } else { 0 };
                    v.push(Arrival {
                        time: VirtualTime::from_ticks(f as i64 * interval.ticks() + j),
                        job: SimJob {
                            job_id: id,
                            kind: JobKind::Transfer,
                            demand: *file_bits,
                            resources: vec!["T0-lan".into(), format!("wan-T0-{t1}"), format!("{t1}-lan"), format!("{t1}-db")],
                            object: Some(format!("{t1}/file{f}")),
                            size: None,
                        },
                    });
                    id += 1;
                }
            }
            v
        }
    };
    out.retain(|a| a.time <= horizon);
    out.sort_by_key(|a| (a.time, a.job.job_id));
    out
}

/// Final disk contents recorded by a previous run, as initial placements.
pub fn placements_from_pool(pool: &ResultPool) -> Vec<InitialPlacement> {
    let mut seen = BTreeSet::new();
    pool.query("db_placement")
        .filter(|r| r.tag("tier") == Some("disk"))
        .filter_map(|r| {
            let db = r.tag("db")?.to_string();
            let object = r.tag("object")?.to_string();
            seen.insert((db.clone(), object.clone())).then_some(InitialPlacement { db, object, size: r.value as u64 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "minimal", "seed": 3, "horizon": 10000000,
        "model": {"type": "grid",
            "centers": [{"name": "c", "cpus": [{"id": "cpu", "power": 10}]}],
            "workload": {"type": "jobs", "jobs": [{"time": 0, "kind": "PROCESSING", "demand": 10, "resources": ["cpu"]}]}}
    }"#;

    #[test]
    fn minimal_parses() {
        let s = Scenario::parse(MINIMAL.as_bytes()).unwrap();
        assert_eq!(s.lookahead, DEFAULT_LOOKAHEAD);
        assert_eq!(s.participants.local_count(), Some(Ok(1)));
        let g = s.grid().unwrap();
        assert_eq!(expand_workload(g, s.seed, s.horizon).len(), 1);
    }

    #[test]
    fn undeclared_link_named() {
        let bad = MINIMAL.replace(r#""resources": ["cpu"]"#, r#""resources": ["cpu", "lan9"]"#);
        match Scenario::parse(bad.as_bytes()) {
            Err(ScenarioError::Invalid(v)) => assert!(v.iter().any(|e| e.contains("lan9")), "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_errors_listed() {
        let bad = MINIMAL.replace(r#""horizon": 10000000"#, r#""horizon": 0"#).replace(r#"["cpu"]"#, r#"["nope"]"#);
        match Scenario::parse(bad.as_bytes()) {
            Err(ScenarioError::Invalid(v)) => {
                assert!(v.iter().any(|e| e.contains("horizon")));
                assert!(v.iter().any(|e| e.contains("nope")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_json() {
        assert!(matches!(Scenario::parse(b"{not json"), Err(ScenarioError::Malformed(_))));
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = Scenario::parse(MINIMAL.as_bytes()).unwrap();
        let compact: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        let b = Scenario::parse(compact.to_string().as_bytes()).unwrap();
        assert_eq!(a.sha256(), b.sha256());
    }

    fn random_grid() -> GridSpec {
        serde_json::from_str(
            r#"{"centers": [{"name": "c", "cpus": [{"id": "cpu", "power": 10}],
                "links": [{"id": "l", "bandwidth": 100, "kind": "LAN"}]}],
                "workload": {"type": "random", "count": 50, "mean_interarrival": 1000, "min_demand": 1, "max_demand": 99}}"#,
        )
        .unwrap()
    }

    #[test]
    fn seed_determines_generated_workload() {
        let g = random_grid();
        let h = VirtualTime::MAX;
        assert_eq!(expand_workload(&g, 7, h), expand_workload(&g, 7, h));
        assert_ne!(expand_workload(&g, 7, h), expand_workload(&g, 8, h));
    }

    #[test]
    fn replication_targets_every_t1() {
        let g = GridSpec {
            template: Some(TemplateSpec { t1: 2, wan_bandwidth: 100, bandwidth_scale: 2.0, db_capacity: 50 }),
            workload: Workload::Replication { files: 3, interval: VirtualTime::from_secs(1), file_bits: 80, jitter: VirtualTime::ZERO },
            ..Default::default()
        };
        let topo = g.topology();
        assert_eq!(topo.wan.len(), 2);
        assert_eq!(topo.wan[0].bandwidth, 200);
        let jobs = expand_workload(&g, 1, VirtualTime::MAX);
        assert_eq!(jobs.len(), 6);
        let (reg, errs) = topo.registry();
        assert!(errs.is_empty(), "{errs:?}");
        for a in &jobs {
            a.job.plan(&reg).unwrap();
        }
    }
}

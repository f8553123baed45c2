//! Processes of a Grid scenario: workload driver, fluid resources,
//! databases, replica monitors and job runners.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::components::fluid::{FluidModel, ShareChange, MICRO};
use crate::components::job::{JobKind, JobPlan, SimJob};
use crate::components::regional::{CpuSpec, DbSpec, LinkSpec, MassSpec};
use crate::components::replica::{apply_state_update, Replica, StateUpdate};
use crate::components::storage::{DbServer, MassStorage};
use crate::components::ComponentRegistry;
use crate::error::{LpError, ModelError, ScenarioError};
use crate::event::{EventKind, SimEvent};
use crate::ids::LpId;
use crate::lp::{Behavior, LpContext};
use crate::scenario::{expand_workload, Arrival, GridSpec, InitialPlacement, Topology};
use crate::time::VirtualTime;

use super::{job_lp, msg_of, Msg, Seed};

pub const DRIVER: LpId = LpId(1);
pub const NETWORK: LpId = LpId(2);
const CPU_BASE: u64 = 1000;
const DB_BASE: u64 = 2000;
const REPLICA_BASE: u64 = 3000;

pub(crate) const JOB_KIND: &str = "job";

struct DbSite {
    center: usize,
    spec: DbSpec,
    mass: Vec<MassSpec>,
}

/// Static structure of a Grid context, shared read-only by its processes.
pub struct GridLayout {
    pub topology: Topology,
    pub registry: ComponentRegistry,
    pub arrivals: Vec<Arrival>,
    pub lookahead: VirtualTime,
    resource_lp: BTreeMap<String, LpId>,
    links: Vec<LinkSpec>,
    cpus: BTreeMap<LpId, (usize, CpuSpec)>,
    dbs: BTreeMap<LpId, DbSite>,
    replicas: BTreeMap<LpId, usize>,
    placements: Vec<InitialPlacement>,
}

impl GridLayout {
    pub fn new(g: &GridSpec, seed: u64, horizon: VirtualTime, lookahead: VirtualTime) -> Result<Self, ScenarioError> {
        let topology = g.topology();
        let (registry, errs) = topology.registry();
        if !errs.is_empty() {
            return Err(ScenarioError::Invalid(errs));
        }
        let mut resource_lp = BTreeMap::new();
        let mut links = Vec::new();
        let mut cpus = BTreeMap::new();
        let mut dbs = BTreeMap::new();
        let mut replicas = BTreeMap::new();
        for (ci, c) in topology.centers.iter().enumerate() {
            for cpu in &c.cpus {
                let lp = LpId(CPU_BASE + cpus.len() as u64);
                resource_lp.insert(cpu.id.clone(), lp);
                cpus.insert(lp, (ci, cpu.clone()));
            }
            for l in &c.links {
                resource_lp.insert(l.id.clone(), NETWORK);
                links.push(l.clone());
            }
            for db in &c.dbs {
                let lp = LpId(DB_BASE + dbs.len() as u64);
                resource_lp.insert(db.id.clone(), lp);
                let mass = db.mass.iter().filter_map(|m| c.mass.iter().find(|s| &s.id == m).cloned()).collect();
                dbs.insert(lp, DbSite { center: ci, spec: db.clone(), mass });
            }
            if g.replicas {
                replicas.insert(LpId(REPLICA_BASE + ci as u64), ci);
            }
        }
        for l in &topology.wan {
            resource_lp.insert(l.id.clone(), NETWORK);
            links.push(l.clone());
        }
        Ok(GridLayout {
            arrivals: expand_workload(g, seed, horizon),
            topology,
            registry,
            lookahead,
            resource_lp,
            links,
            cpus,
            dbs,
            replicas,
            placements: g.initial_placements.clone(),
        })
    }

    pub fn lp_of(&self, resource: &str) -> Result<LpId, ModelError> {
        self.resource_lp.get(resource).copied().ok_or_else(|| ModelError::UnknownResource(resource.to_string()))
    }

    pub(crate) fn static_lps(&self) -> Vec<(LpId, usize)> {
        let mut v = vec![(DRIVER, 0), (NETWORK, 0)];
        v.extend(self.cpus.iter().map(|(lp, (c, _))| (*lp, *c)));
        v.extend(self.dbs.iter().map(|(lp, s)| (*lp, s.center)));
        v.extend(self.replicas.iter().map(|(lp, c)| (*lp, *c)));
        v
    }

    pub(crate) fn make_behavior(self: &Arc<Self>, lp: LpId) -> Result<Box<dyn Behavior>, ModelError> {
        if lp == DRIVER {
            return Ok(Box::new(Driver::new(self.clone())));
        }
        if lp == NETWORK {
            let mut m = FluidModel::new();
            for l in &self.links {
                m.add_resource(&l.id, l.bandwidth)?;
            }
            return Ok(Box::new(FluidLp::new("network", "link_bits", m)));
        }
        if let Some((_, cpu)) = self.cpus.get(&lp) {
            let mut m = FluidModel::new();
            m.add_resource(&cpu.id, cpu.power)?;
            return Ok(Box::new(FluidLp::new("cpu", "cpu_work", m)));
        }
        if let Some(site) = self.dbs.get(&lp) {
            let mut db = DbServer::new(&site.spec.id, site.spec.capacity);
            for p in self.placements.iter().filter(|p| p.db == site.spec.id) {
                db.preload(&p.object, p.size, VirtualTime::ZERO)?;
            }
            let mass = site
                .mass
                .iter()
                .map(|m| MassStorage::new(&m.id, m.capacity, VirtualTime::from_ticks(m.mount_latency_us)))
                .collect();
            let monitors = self.replicas.keys().copied().collect();
            return Ok(Box::new(DbLp::new(db, mass, monitors)));
        }
        if let Some(c) = self.replicas.get(&lp) {
            return Ok(Box::new(ReplicaMonitor::new(&self.topology.centers[*c].name)));
        }
        Err(ModelError::UnknownResource(format!("no process {lp}")))
    }

    pub(crate) fn seeds(&self) -> Vec<Seed> {
        self.arrivals
            .first()
            .map(|a| Seed { lp: DRIVER, at: a.time, kind: EventKind::Wakeup, payload: Msg::Arrival.encode() })
            .into_iter()
            .collect()
    }
}

fn unexpected(who: &str, m: &Msg) -> LpError {
    ModelError::Payload(format!("{who} cannot handle {m:?}")).into()
}

/// Starts every job at its arrival instant.
pub struct Driver {
    layout: Arc<GridLayout>,
    next: usize,
}

impl Driver {
    pub fn new(layout: Arc<GridLayout>) -> Self {
        Driver { layout, next: 0 }
    }
}

impl Behavior for Driver {
    fn kind(&self) -> &str {
        "driver"
    }

    fn handle(&mut self, e: &SimEvent, ctx: &mut LpContext) -> Result<(), LpError> {
        let m = msg_of(e)?;
        if m != Msg::Arrival {
            return Err(unexpected("driver", &m));
        }
        let arrivals = &self.layout.arrivals;
        while self.next < arrivals.len() && arrivals[self.next].time <= ctx.now() {
            let job = arrivals[self.next].job.clone();
            let id = job.job_id.to_string();
            ctx.record("submitted_demand", job.demand as f64, &[("job", &id), ("kind", kind_name(job.kind))]);
            ctx.send(job_lp(job.job_id), EventKind::StartNewJob, Msg::Start { job }.encode())?;
            self.next += 1;
        }
        if let Some(a) = arrivals.get(self.next) {
            ctx.emit(ctx.lp(), a.time, EventKind::Wakeup, Msg::Arrival.encode())?;
        }
        Ok(())
    }
}

pub(crate) fn kind_name(k: JobKind) -> &'static str {
    match k {
        JobKind::Processing => "PROCESSING",
        JobKind::Transfer => "TRANSFER",
        JobKind::Analysis => "ANALYSIS",
    }
}

/// Equal-share resources (a CPU, or every link of the context).
pub struct FluidLp {
    name: &'static str,
    metric: &'static str,
    model: FluidModel,
    owners: BTreeMap<u64, LpId>,
    stale: u64,
}

impl FluidLp {
    pub fn new(name: &'static str, metric: &'static str, model: FluidModel) -> Self {
        FluidLp { name, metric, model, owners: BTreeMap::new(), stale: 0 }
    }

    fn schedule(&self, ctx: &mut LpContext, rs: Vec<crate::components::fluid::Reschedule>) -> Result<(), LpError> {
        for r in rs {
            let at = r.at.max(ctx.earliest_self());
            ctx.emit(ctx.lp(), at, EventKind::Wakeup, Msg::FlowWake { flow: r.flow, version: r.version }.encode())?;
        }
        Ok(())
    }
}

impl Behavior for FluidLp {
    fn kind(&self) -> &str {
        self.name
    }

    fn handle(&mut self, e: &SimEvent, ctx: &mut LpContext) -> Result<(), LpError> {
        match msg_of(e)? {
            Msg::FlowRequest { flow, resources, demand, reply_to } => {
                let chain: Vec<&str> = resources.iter().map(String::as_str).collect();
                let rs = self.model.submit(ctx.now(), flow, &chain, demand)?;
                self.owners.insert(flow, reply_to);
                self.schedule(ctx, rs)
            }
            Msg::FlowWake { flow, version } => {
                if !self.model.is_current(flow, version) {
                    self.stale += 1;
                    return Ok(());
                }
                let (rs, done) = self.model.share_recompute(ctx.now(), ShareChange::Leave { id: flow })?;
                let done = done.expect("leave reports the flow");
                let to = self.owners.remove(&flow).ok_or(ModelError::UnknownJob(flow))?;
                let served = done.served_micro as f64 / MICRO as f64;
                ctx.send(to, EventKind::Generic, Msg::FlowDone { flow, served, interrupts: done.interrupts }.encode())?;
                self.schedule(ctx, rs)
            }
            m => Err(unexpected(self.name, &m)),
        }
    }

    fn on_end(&mut self, ctx: &mut LpContext) -> Result<(), LpError> {
        let lp = ctx.lp().to_string();
        ctx.record("interrupts", self.model.interrupts as f64, &[("lp", &lp)]);
        ctx.record("stale_wakeups", self.stale as f64, &[("lp", &lp)]);
        for r in self.model.resources() {
            ctx.record(self.metric, r.delivered_micro() as f64 / MICRO as f64, &[("resource", &r.id)]);
        }
        Ok(())
    }
}

/// A database server with its tape tier; publishes its state to replicas.
pub struct DbLp {
    db: DbServer,
    mass: Vec<MassStorage>,
    cursor: usize,
    version: u64,
    monitors: Vec<LpId>,
}

impl DbLp {
    pub fn new(db: DbServer, mass: Vec<MassStorage>, monitors: Vec<LpId>) -> Self {
        DbLp { db, mass, cursor: 0, version: 0, monitors }
    }

    fn publish(&mut self, ctx: &mut LpContext) -> Result<(), LpError> {
        self.version += 1;
        let mut fields = BTreeMap::new();
        fields.insert("used".to_string(), self.db.used().into());
        fields.insert("objects".to_string(), (self.db.objects().len() as u64).into());
        let u = StateUpdate { component_id: self.db.id.clone(), state_version: self.version, fields };
        for &m in &self.monitors {
            ctx.send(m, EventKind::StateUpdate, Msg::State(u.clone()).encode())?;
        }
        Ok(())
    }
}

impl Behavior for DbLp {
    fn kind(&self) -> &str {
        "db"
    }

    fn handle(&mut self, e: &SimEvent, ctx: &mut LpContext) -> Result<(), LpError> {
        let now = ctx.now();
        let db_id = self.db.id.clone();
        match msg_of(e)? {
            Msg::DbWrite { job, object, size, reply_to } => {
                match self.db.write(&object, size, now, &mut self.mass, &mut self.cursor) {
                    Ok(out) => {
                        for m in out.migrations {
                            let tape = &self.mass[m.target];
                            let tags = [("db", db_id.as_str()), ("object", m.object.as_str()), ("tape", tape.id.as_str())];
                            ctx.record("migration", m.size as f64, &tags);
                            let at = now.checked_add(tape.mount_latency)?.max(ctx.earliest_self());
                            let done = Msg::MigrationDone { object: m.object.clone(), tape: tape.id.clone() };
                            ctx.emit(ctx.lp(), at, EventKind::Wakeup, done.encode())?;
                        }
                        ctx.send(reply_to, EventKind::Generic, Msg::DbReply { job, object, size: Some(size) }.encode())?;
                        self.publish(ctx)?;
                    }
                    Err(err) => {
                        let reason = err.to_string();
                        ctx.record("db_write_failed", size as f64, &[("db", &db_id), ("object", &object), ("reason", &reason)]);
                        ctx.send(reply_to, EventKind::Generic, Msg::DbReply { job, object, size: None }.encode())?;
                    }
                }
            }
            Msg::DbRead { job, object, reply_to } => {
                let (size, ready) = match self.db.read(&object, now) {
                    Some(s) => (Some(s), now),
                    None => match self.mass.iter_mut().find_map(|t| t.read(&object, now)) {
                        Some((s, ready)) => (Some(s), ready),
                        None => (None, now),
                    },
                };
                let at = ready.checked_add(ctx.lookahead())?;
                ctx.emit(reply_to, at, EventKind::Generic, Msg::DbReply { job, object, size }.encode())?;
            }
            Msg::MigrationDone { object, tape } => {
                ctx.record("migration_done", 1.0, &[("db", &db_id), ("object", &object), ("tape", &tape)]);
            }
            m => return Err(unexpected("db", &m)),
        }
        self.db.check_invariant()?;
        Ok(())
    }

    fn on_end(&mut self, ctx: &mut LpContext) -> Result<(), LpError> {
        let db_id = self.db.id.clone();
        for (obj, o) in self.db.objects() {
            ctx.record("db_placement", o.size as f64, &[("db", &db_id), ("object", obj), ("tier", "disk")]);
        }
        for t in &self.mass {
            for (obj, o) in t.objects() {
                ctx.record("db_placement", o.size as f64, &[("db", &db_id), ("object", obj), ("tier", "tape"), ("tape", &t.id)]);
            }
        }
        ctx.record("db_used", self.db.used() as f64, &[("db", &db_id)]);
        Ok(())
    }
}

/// Holds replicas of remote database state.
pub struct ReplicaMonitor {
    center: String,
    replicas: BTreeMap<String, Replica>,
}

impl ReplicaMonitor {
    pub fn new(center: &str) -> Self {
        ReplicaMonitor { center: center.to_string(), replicas: BTreeMap::new() }
    }

    pub fn replica(&self, component: &str) -> Option<&Replica> {
        self.replicas.get(component)
    }
}

impl Behavior for ReplicaMonitor {
    fn kind(&self) -> &str {
        "replica"
    }

    fn handle(&mut self, e: &SimEvent, ctx: &mut LpContext) -> Result<(), LpError> {
        let Msg::State(u) = msg_of(e)? else {
            return Err(ModelError::Payload("replica monitor expects state updates".into()).into());
        };
        let r = self.replicas.entry(u.component_id.clone()).or_insert_with(|| Replica::new(&u.component_id, e.src_lp));
        if apply_state_update(r, &u)? {
            let used = r.fields.get("used").and_then(|v| v.as_u64()).unwrap_or(0);
            let tags = [("component", u.component_id.as_str()), ("center", self.center.as_str())];
            ctx.record("replica_version", u.state_version as f64, &tags);
            ctx.record("replica_used", used as f64, &tags);
        }
        Ok(())
    }
}

struct ActiveJob {
    job: SimJob,
    plan: JobPlan,
    started: VirtualTime,
    served: f64,
}

/// Runs one job at a time; idle runners are reused for later jobs.
pub struct JobRunner {
    layout: Arc<GridLayout>,
    active: Option<ActiveJob>,
}

impl JobRunner {
    pub fn new(layout: Arc<GridLayout>) -> Self {
        JobRunner { layout, active: None }
    }

    fn request_flow(&self, ctx: &mut LpContext, resources: Vec<String>, demand: u64) -> Result<(), LpError> {
        let a = self.active.as_ref().expect("active job");
        let to = self.layout.lp_of(&resources[0])?;
        let m = Msg::FlowRequest { flow: a.job.job_id, resources, demand, reply_to: ctx.lp() };
        ctx.send(to, EventKind::Generic, m.encode())
    }

    fn finish(&mut self, ctx: &mut LpContext, status: &str) {
        let a = self.active.take().expect("active job");
        let id = a.job.job_id.to_string();
        let kind = kind_name(a.job.kind);
        let elapsed = (ctx.now() - a.started).as_secs_f64();
        ctx.record("job_completion", elapsed, &[("job", &id), ("kind", kind), ("status", status)]);
        ctx.record("completed_demand", a.served, &[("job", &id), ("kind", kind)]);
    }

    fn owns(&self, job: u64) -> bool {
        self.active.as_ref().map(|a| a.job.job_id == job).unwrap_or(false)
    }
}

impl Behavior for JobRunner {
    fn kind(&self) -> &str {
        JOB_KIND
    }

    fn handle(&mut self, e: &SimEvent, ctx: &mut LpContext) -> Result<(), LpError> {
        match msg_of(e)? {
            Msg::Start { job } => {
                if self.active.is_some() {
                    return Err(ModelError::DuplicateJob(job.job_id).into());
                }
                let plan = job.plan(&self.layout.registry)?;
                let demand = job.demand;
                let kind = job.kind;
                let object = job.object.clone();
                let job_id = job.job_id;
                self.active = Some(ActiveJob { job, plan, started: ctx.now(), served: 0.0 });
                let plan = &self.active.as_ref().expect("just set").plan;
                match kind {
                    JobKind::Processing => {
                        let cpu = plan.cpu.clone().expect("planned");
                        self.request_flow(ctx, vec![cpu], demand)
                    }
                    JobKind::Transfer => {
                        let links = plan.links.clone();
                        self.request_flow(ctx, links, demand)
                    }
                    JobKind::Analysis => {
                        let db = self.layout.lp_of(plan.db.as_ref().expect("planned"))?;
                        let object = object.expect("planned");
                        ctx.send(db, EventKind::Generic, Msg::DbRead { job: job_id, object, reply_to: ctx.lp() }.encode())
                    }
                }
            }
            Msg::FlowDone { flow, served, .. } => {
                if !self.owns(flow) {
                    return Ok(());
                }
                let a = self.active.as_mut().expect("owned");
                a.served += served;
                match (a.job.kind, a.plan.db.clone()) {
                    (JobKind::Transfer, Some(db)) => {
                        let object = a.job.object.clone().expect("planned");
                        let size = a.job.stored_size();
                        let m = Msg::DbWrite { job: flow, object, size, reply_to: ctx.lp() };
                        ctx.send(self.layout.lp_of(&db)?, EventKind::Generic, m.encode())
                    }
                    _ => {
                        self.finish(ctx, "done");
                        Ok(())
                    }
                }
            }
            Msg::DbReply { job, size, .. } => {
                if !self.owns(job) {
                    return Ok(());
                }
                let a = self.active.as_ref().expect("owned");
                match (a.job.kind, size) {
                    (JobKind::Transfer, Some(_)) => self.finish(ctx, "stored"),
                    (JobKind::Transfer, None) => self.finish(ctx, "store_failed"),
                    (JobKind::Analysis, Some(_)) => {
                        let cpu = a.plan.cpu.clone().expect("planned");
                        let demand = a.job.demand;
                        return self.request_flow(ctx, vec![cpu], demand);
                    }
                    (_, None) => self.finish(ctx, "read_miss"),
                    (_, Some(_)) => return Err(unexpected("job", &Msg::DbReply { job, object: String::new(), size })),
                }
                Ok(())
            }
            m => Err(unexpected("job", &m)),
        }
    }

    fn on_end(&mut self, ctx: &mut LpContext) -> Result<(), LpError> {
        if let Some(a) = &self.active {
            let id = a.job.job_id.to_string();
            ctx.record("job_unfinished", a.served, &[("job", &id), ("kind", kind_name(a.job.kind))]);
        }
        Ok(())
    }

    fn is_idle(&self) -> bool {
        self.active.is_none()
    }
}

//! Regional centers and the component registry of a context.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LinkKind {
    Lan,
    Wan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuSpec {
    pub id: String,
    /// Work units per simulated second.
    pub power: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub id: String,
    /// Bits per simulated second.
    pub bandwidth: u64,
    pub kind: LinkKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbSpec {
    pub id: String,
    pub capacity: u64,
    /// Mass-storage ids, in overflow order.
    #[serde(default)]
    pub mass: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MassSpec {
    pub id: String,
    #[serde(default)]
    pub capacity: Option<u64>,
    #[serde(default)]
    pub mount_latency_us: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegionalCenterSpec {
    pub name: String,
    #[serde(default)]
    pub cpus: Vec<CpuSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub dbs: Vec<DbSpec>,
    #[serde(default)]
    pub mass: Vec<MassSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ComponentKind {
    Cpu,
    Link,
    Db,
    Mass,
    Catalog,
    Scheduler,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub kind: ComponentKind,
    /// Owning center; `None` for inter-center links.
    pub center: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComponentRegistry {
    entries: BTreeMap<String, ComponentEntry>,
}

impl ComponentRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: &str, kind: ComponentKind, center: Option<&str>) -> Result<(), ModelError> {
        if self.entries.contains_key(id) {
            return Err(ModelError::DuplicateComponent(id.to_string()));
        }
        self.entries.insert(id.to_string(), ComponentEntry { kind, center: center.map(str::to_string) });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ComponentEntry> {
        self.entries.get(id)
    }

    pub fn kind_of(&self, id: &str) -> Result<ComponentKind, ModelError> {
        self.get(id).map(|e| e.kind).ok_or_else(|| ModelError::UnknownResource(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ComponentEntry)> {
        self.entries.iter()
    }

    pub fn ids_of(&self, kind: ComponentKind) -> Vec<String> {
        self.entries.iter().filter(|(_, e)| e.kind == kind).map(|(k, _)| k.clone()).collect()
    }
}

/// Register every component a center names. Returns their ids in
/// declaration order.
pub fn instantiate_regional_center(spec: &RegionalCenterSpec, reg: &mut ComponentRegistry) -> Result<Vec<String>, ModelError> {
    let mut ids = Vec::new();
    let center = Some(spec.name.as_str());
    let all = spec
        .cpus
        .iter()
        .map(|c| (&c.id, ComponentKind::Cpu))
        .chain(spec.links.iter().map(|l| (&l.id, ComponentKind::Link)))
        .chain(spec.dbs.iter().map(|d| (&d.id, ComponentKind::Db)))
        .chain(spec.mass.iter().map(|m| (&m.id, ComponentKind::Mass)));
    for (id, kind) in all {
        reg.register(id, kind, center)?;
        ids.push(id.clone());
    }
    for db in &spec.dbs {
        for m in &db.mass {
            if !spec.mass.iter().any(|s| &s.id == m) {
                return Err(ModelError::UnknownResource(m.clone()));
            }
        }
    }
    Ok(ids)
}

/// One T0 center wired to `n_t1` T1 centers, one WAN link each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TierTemplate {
    pub centers: Vec<RegionalCenterSpec>,
    pub wan: Vec<LinkSpec>,
}

pub fn t0_t1_template(n_t1: usize, wan_bandwidth: u64, db_capacity: u64) -> TierTemplate {
    let center = |name: &str| RegionalCenterSpec {
        name: name.to_string(),
        cpus: vec![CpuSpec { id: format!("{name}-cpu"), power: 1000 }],
        links: vec![LinkSpec { id: format!("{name}-lan"), bandwidth: wan_bandwidth.saturating_mul(10), kind: LinkKind::Lan }],
        dbs: vec![DbSpec { id: format!("{name}-db"), capacity: db_capacity, mass: vec![format!("{name}-tape")] }],
        mass: vec![MassSpec { id: format!("{name}-tape"), capacity: None, mount_latency_us: 0 }],
    };
    let mut centers = vec![center("T0")];
    let mut wan = Vec::new();
    for i in 1..=n_t1 {
        let name = format!("T1_{i}");
        centers.push(center(&name));
        wan.push(LinkSpec { id: format!("wan-T0-{name}"), bandwidth: wan_bandwidth, kind: LinkKind::Wan });
    }
    TierTemplate { centers, wan }
}

/// Registration-only stand-in for the metadata catalog and job scheduler.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LookupStub {
    entries: BTreeMap<String, String>,
}

impl LookupStub {
    pub fn register(&mut self, id: &str, value: &str) {
        self.entries.insert(id.to_string(), value.to_string());
    }

    pub fn lookup(&self, id: &str) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }
}

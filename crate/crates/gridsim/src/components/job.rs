//! Jobs submitted by a workload.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

use super::regional::{ComponentKind, ComponentRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobKind {
    /// `demand` work units on one CPU.
    Processing,
    /// `demand` bits over a chain of links, optionally stored in a database
    /// on arrival.
    Transfer,
    /// Read a dataset from a database, then process it.
    Analysis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimJob {
    pub job_id: u64,
    pub kind: JobKind,
    pub demand: u64,
    pub resources: Vec<String>,
    /// Object written (TRANSFER) or read (ANALYSIS).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    /// Bytes stored for a TRANSFER that ends in a database; defaults to the
    /// demand in bits divided by 8.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<u64>,
}

/// Resolved resource roles of a job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobPlan {
    pub cpu: Option<String>,
    pub links: Vec<String>,
    pub db: Option<String>,
}

impl SimJob {
    pub fn stored_size(&self) -> u64 {
        self.size.unwrap_or(self.demand.div_ceil(8))
    }

    /// Check resources against the registry and split them by role.
    pub fn plan(&self, reg: &ComponentRegistry) -> Result<JobPlan, ModelError> {
        if self.demand == 0 {
            return Err(ModelError::ZeroDemand);
        }
        let mut plan = JobPlan { cpu: None, links: Vec::new(), db: None };
        for r in &self.resources {
            match reg.kind_of(r)? {
                ComponentKind::Cpu => plan.cpu = Some(r.clone()),
                ComponentKind::Link => plan.links.push(r.clone()),
                ComponentKind::Db => plan.db = Some(r.clone()),
                _ => return Err(ModelError::UnknownResource(r.clone())),
            }
        }
        let missing = |what: &str| ModelError::UnknownResource(format!("job {} needs a {what}", self.job_id));
        match self.kind {
            JobKind::Processing if plan.cpu.is_none() => Err(missing("cpu")),
            JobKind::Transfer if plan.links.is_empty() => Err(ModelError::EmptyChain),
            JobKind::Transfer if plan.db.is_some() && self.object.is_none() => Err(missing("object name")),
            JobKind::Analysis if plan.cpu.is_none() || plan.db.is_none() || self.object.is_none() => {
                Err(missing("cpu, db and object"))
            }
            _ => Ok(plan),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> ComponentRegistry {
        let mut r = ComponentRegistry::new();
        r.register("cpu", ComponentKind::Cpu, Some("c")).unwrap();
        r.register("l1", ComponentKind::Link, Some("c")).unwrap();
        r.register("db", ComponentKind::Db, Some("c")).unwrap();
        r
    }

    fn job(kind: JobKind, res: &[&str]) -> SimJob {
        SimJob { job_id: 1, kind, demand: 10, resources: res.iter().map(|s| s.to_string()).collect(), object: None, size: None }
    }

    #[test]
    fn roles_resolved() {
        let p = job(JobKind::Transfer, &["l1"]).plan(&reg()).unwrap();
        assert_eq!(p.links, vec!["l1"]);
        assert!(job(JobKind::Processing, &["cpu"]).plan(&reg()).is_ok());
    }

    #[test]
    fn unregistered_resource_rejected() {
        assert_eq!(job(JobKind::Transfer, &["nope"]).plan(&reg()), Err(ModelError::UnknownResource("nope".into())));
        assert_eq!(job(JobKind::Transfer, &["cpu"]).plan(&reg()), Err(ModelError::EmptyChain));
    }

    #[test]
    fn stored_size_rounds_up() {
        let mut j = job(JobKind::Transfer, &["l1"]);
        j.demand = 9;
        assert_eq!(j.stored_size(), 2);
    }
}

//! Result records, the client-side result pool, and its on-disk format.
//!
//! An exported run is a directory holding `manifest.json`, `records.csv`
//! (model metrics), `trace.csv` (the processed-event trace) and
//! `runtime.csv` (deployment-dependent counters such as sync messages).
//! The manifest pins a SHA-256 of every CSV file.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ResultError;
use crate::event::{EventKey, EventKind};
use crate::ids::{ContextId, LpId};
use crate::time::VirtualTime;

pub const RECORD_COLUMNS: [&str; 5] = ["context_id", "metric", "virtual_time", "value", "tags"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub context: ContextId,
    pub metric: String,
    pub virtual_time: VirtualTime,
    pub value: f64,
    pub tags: BTreeMap<String, String>,
}

impl ResultRecord {
    pub fn new(context: ContextId, metric: &str, virtual_time: VirtualTime, value: f64, tags: &[(&str, &str)]) -> Self {
        ResultRecord {
            context,
            metric: metric.to_string(),
            virtual_time,
            value,
            tags: tags.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn tag(&self, k: &str) -> Option<&str> {
        self.tags.get(k).map(String::as_str)
    }

    fn tags_field(&self) -> String {
        self.tags.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }

    /// Deterministic merge order for records gathered from several agents.
    pub fn sort_key(&self) -> (VirtualTime, String, String, u64) {
        (self.virtual_time, self.metric.clone(), self.tags_field(), self.value.to_bits())
    }
}

/// A metric computed at the end of a run from the records of another.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedMetric {
    pub name: String,
    pub from: String,
    pub aggregate: Aggregate,
    /// One record per value of this tag instead of one overall.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Count,
    Sum,
    Mean,
    Min,
    Max,
}

impl Aggregate {
    fn apply(self, values: &[f64]) -> f64 {
        let n = values.len() as f64;
        match self {
            Aggregate::Count => n,
            Aggregate::Sum => values.iter().sum(),
            Aggregate::Mean if values.is_empty() => 0.0,
            Aggregate::Mean => values.iter().sum::<f64>() / n,
            Aggregate::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregate::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Records for `specs`, stamped `at`. Groups with no source records are
/// skipped except for `count`, which reports 0 overall.
pub fn derive_metrics(records: &[ResultRecord], specs: &[DerivedMetric], context: ContextId, at: VirtualTime) -> Vec<ResultRecord> {
    let mut out = Vec::new();
    for d in specs {
        let mut groups: BTreeMap<Option<&str>, Vec<f64>> = BTreeMap::new();
        for r in records.iter().filter(|r| r.metric == d.from) {
            let key = match &d.by {
                Some(tag) => match r.tag(tag) {
                    Some(v) => Some(v),
                    None => continue,
                },
                None => None,
            };
            groups.entry(key).or_default().push(r.value);
        }
        if groups.is_empty() && d.by.is_none() && d.aggregate == Aggregate::Count {
            groups.insert(None, Vec::new());
        }
        for (key, values) in groups {
            let tags: Vec<(&str, &str)> = match (&d.by, key) {
                (Some(tag), Some(v)) => vec![(tag.as_str(), v)],
                _ => vec![],
            };
            out.push(ResultRecord::new(context, &d.name, at, d.aggregate.apply(&values), &tags));
        }
    }
    out
}

/// One processed event, as seen by the destination process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TraceEntry {
    pub key: EventKey,
    pub lp: LpId,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub context_id: u64,
    pub seed: u64,
    pub scenario_sha256: String,
    pub agents: Vec<u64>,
    pub record_count: usize,
    pub trace_count: usize,
    pub records_sha256: String,
    pub trace_sha256: String,
    pub runtime_sha256: String,
}

/// Append-only store of one run's results.
#[derive(Debug, Clone, Default)]
pub struct ResultPool {
    pub context: ContextId,
    pub name: String,
    pub seed: u64,
    pub scenario_sha256: String,
    pub agents: Vec<u64>,
    records: Vec<ResultRecord>,
    runtime: Vec<ResultRecord>,
    trace: Vec<TraceEntry>,
    last_time: HashMap<String, VirtualTime>,
}

impl ResultPool {
    pub fn new(context: ContextId, name: &str, seed: u64, scenario_sha256: &str, agents: Vec<u64>) -> Self {
        ResultPool {
            context,
            name: name.to_string(),
            seed,
            scenario_sha256: scenario_sha256.to_string(),
            agents,
            ..Default::default()
        }
    }

    pub fn record_result(&mut self, r: ResultRecord) -> Result<(), ResultError> {
        if r.context != self.context {
            return Err(ResultError::CrossContext { expected: self.context, got: r.context });
        }
        if let Some(&last) = self.last_time.get(&r.metric) {
            if r.virtual_time < last {
                return Err(ResultError::OutOfOrder { metric: r.metric, last, got: r.virtual_time });
            }
        }
        self.last_time.insert(r.metric.clone(), r.virtual_time);
        self.records.push(r);
        Ok(())
    }

    /// Counters that depend on how the run was deployed (agent count,
    /// transport); kept apart from the model records.
    pub fn record_runtime(&mut self, r: ResultRecord) -> Result<(), ResultError> {
        if r.context != self.context {
            return Err(ResultError::CrossContext { expected: self.context, got: r.context });
        }
        self.runtime.push(r);
        Ok(())
    }

    pub fn set_trace(&mut self, mut trace: Vec<TraceEntry>) {
        trace.sort();
        self.trace = trace;
    }

    pub fn records(&self) -> &[ResultRecord] {
        &self.records
    }

    pub fn runtime(&self) -> &[ResultRecord] {
        &self.runtime
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn query<'a>(&'a self, metric: &'a str) -> impl Iterator<Item = &'a ResultRecord> + 'a {
        self.records.iter().filter(move |r| r.metric == metric)
    }

    pub fn query_tag<'a>(&'a self, metric: &'a str, key: &'a str, value: &'a str) -> impl Iterator<Item = &'a ResultRecord> + 'a {
        self.query(metric).filter(move |r| r.tag(key) == Some(value))
    }

    pub fn runtime_total(&self, metric: &str) -> f64 {
        self.runtime.iter().filter(|r| r.metric == metric).map(|r| r.value).sum()
    }

    pub fn records_csv(&self) -> Result<Vec<u8>, ResultError> {
        records_to_csv(&self.records)
    }

    pub fn trace_csv(&self) -> Result<Vec<u8>, ResultError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["lp", "timestamp", "source", "sequence", "kind"])?;
        for t in &self.trace {
            w.write_record([
                t.lp.0.to_string(),
                t.key.timestamp.ticks().to_string(),
                t.key.source.to_string(),
                t.key.sequence.to_string(),
                t.kind.as_str().to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| ResultError::Io(e.into_error()))
    }

    pub fn runtime_csv(&self) -> Result<Vec<u8>, ResultError> {
        records_to_csv(&self.runtime)
    }

    pub fn manifest(&self) -> Result<Manifest, ResultError> {
        Ok(Manifest {
            name: self.name.clone(),
            context_id: self.context.0,
            seed: self.seed,
            scenario_sha256: self.scenario_sha256.clone(),
            agents: self.agents.clone(),
            record_count: self.records.len(),
            trace_count: self.trace.len(),
            records_sha256: sha256_hex(&self.records_csv()?),
            trace_sha256: sha256_hex(&self.trace_csv()?),
            runtime_sha256: sha256_hex(&self.runtime_csv()?),
        })
    }

    pub fn export(&self, dir: &Path) -> Result<(), ResultError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("records.csv"), self.records_csv()?)?;
        fs::write(dir.join("trace.csv"), self.trace_csv()?)?;
        fs::write(dir.join("runtime.csv"), self.runtime_csv()?)?;
        let mut manifest = serde_json::to_vec_pretty(&self.manifest()?)?;
        manifest.push(b'\n');
        fs::write(dir.join("manifest.json"), manifest)?;
        Ok(())
    }

    pub fn import(dir: &Path) -> Result<ResultPool, ResultError> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
            .map_err(|e| ResultError::Integrity(format!("manifest: {e}")))?;
        let records = read_checked(&dir.join("records.csv"), &manifest.records_sha256)?;
        let trace = read_checked(&dir.join("trace.csv"), &manifest.trace_sha256)?;
        let runtime = read_checked(&dir.join("runtime.csv"), &manifest.runtime_sha256)?;
        let mut pool = ResultPool::new(
            ContextId(manifest.context_id),
            &manifest.name,
            manifest.seed,
            &manifest.scenario_sha256,
            manifest.agents.clone(),
        );
        for r in csv_to_records(&records)? {
            pool.record_result(r)?;
        }
        for r in csv_to_records(&runtime)? {
            pool.record_runtime(r)?;
        }
        pool.trace = csv_to_trace(&trace)?;
        if pool.records.len() != manifest.record_count || pool.trace.len() != manifest.trace_count {
            return Err(ResultError::Integrity("record count differs from manifest".into()));
        }
        Ok(pool)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_checked(path: &Path, expected: &str) -> Result<Vec<u8>, ResultError> {
    let bytes = fs::read(path)?;
    let got = sha256_hex(&bytes);
    if got != expected {
        return Err(ResultError::Integrity(format!("{} hash {got} does not match manifest {expected}", path.display())));
    }
    Ok(bytes)
}

fn records_to_csv(records: &[ResultRecord]) -> Result<Vec<u8>, ResultError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RECORD_COLUMNS)?;
    for r in records {
        w.write_record([
            r.context.0.to_string(),
            r.metric.clone(),
            r.virtual_time.ticks().to_string(),
            format!("{}", r.value),
            r.tags_field(),
        ])?;
    }
    w.into_inner().map_err(|e| ResultError::Io(e.into_error()))
}

fn bad(msg: impl Into<String>) -> ResultError {
    ResultError::Integrity(msg.into())
}

fn csv_to_records(bytes: &[u8]) -> Result<Vec<ResultRecord>, ResultError> {
    let mut rd = csv::Reader::from_reader(bytes);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_COLUMNS {
        return Err(bad(format!("unexpected columns {header:?}")));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        if row.len() != 5 {
            return Err(bad("short record row"));
        }
        let mut tags = BTreeMap::new();
        for kv in row[4].split(';').filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad tag {kv}")))?;
            tags.insert(k.to_string(), v.to_string());
        }
        out.push(ResultRecord {
            context: ContextId(row[0].parse().map_err(|_| bad("context_id"))?),
            metric: row[1].to_string(),
            virtual_time: VirtualTime::from_ticks(row[2].parse().map_err(|_| bad("virtual_time"))?),
            value: row[3].parse().map_err(|_| bad("value"))?,
            tags,
        });
    }
    Ok(out)
}

fn parse_kind(s: &str) -> Result<EventKind, ResultError> {
    Ok(match s {
        "GENERIC" => EventKind::Generic,
        "START_NEW_JOB" => EventKind::StartNewJob,
        "STATE_UPDATE" => EventKind::StateUpdate,
        "WAKEUP" => EventKind::Wakeup,
        "END_OF_RUN" => EventKind::EndOfRun,
        _ => return Err(bad(format!("event kind {s}"))),
    })
}

fn csv_to_trace(bytes: &[u8]) -> Result<Vec<TraceEntry>, ResultError> {
    let mut rd = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        if row.len() != 5 {
            return Err(bad("short trace row"));
        }
        let num = |i: usize| row[i].parse::<u64>().map_err(|_| bad("trace field"));
        out.push(TraceEntry {
            lp: LpId(num(0)?),
            key: EventKey::new(VirtualTime::from_ticks(row[1].parse().map_err(|_| bad("timestamp"))?), num(2)?, num(3)?),
            kind: parse_kind(&row[4])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: i64, metric: &str, job: &str) -> ResultRecord {
        ResultRecord::new(ContextId(1), metric, VirtualTime::from_ticks(t), 1.5, &[("job", job)])
    }

    #[test]
    fn query_by_tag() {
        let mut p = ResultPool::new(ContextId(1), "x", 0, "", vec![1]);
        p.record_result(rec(1, "job_completion", "J")).unwrap();
        p.record_result(rec(2, "job_completion", "K")).unwrap();
        assert_eq!(p.query_tag("job_completion", "job", "J").count(), 1);
    }

    #[test]
    fn derived_metrics_aggregate_per_tag() {
        let mk = |v: f64, kind: &str| ResultRecord::new(ContextId(1), "job_completion", VirtualTime::from_ticks(5), v, &[("kind", kind)]);
        let recs = vec![mk(2.0, "A"), mk(4.0, "A"), mk(10.0, "B"), mk(1.0, "B")];
        let spec = |name: &str, aggregate, by: Option<&str>| DerivedMetric {
            name: name.into(),
            from: "job_completion".into(),
            aggregate,
            by: by.map(String::from),
        };
        let specs = [spec("mean", Aggregate::Mean, Some("kind")), spec("max", Aggregate::Max, None), spec("n", Aggregate::Count, None)];
        let got: Vec<(String, Option<String>, f64)> = derive_metrics(&recs, &specs, ContextId(1), VirtualTime::from_ticks(9))
            .into_iter()
            .map(|r| (r.metric.clone(), r.tag("kind").map(String::from), r.value))
            .collect();
        let want = vec![
            ("mean".to_string(), Some("A".to_string()), 3.0),
            ("mean".to_string(), Some("B".to_string()), 5.5),
            ("max".to_string(), None, 10.0),
            ("n".to_string(), None, 4.0),
        ];
        assert_eq!(got, want);
        let none = derive_metrics(&[], &specs, ContextId(1), VirtualTime::from_ticks(9));
        assert_eq!(none.len(), 1);
        assert_eq!(none[0].value, 0.0);
    }

    #[test]
    fn out_of_order_rejected() {
        let mut p = ResultPool::new(ContextId(1), "x", 0, "", vec![1]);
        p.record_result(rec(5, "m", "a")).unwrap();
        p.record_result(rec(3, "other", "a")).unwrap();
        assert!(matches!(p.record_result(rec(4, "m", "a")), Err(ResultError::OutOfOrder { .. })));
    }

    #[test]
    fn cross_context_rejected() {
        let mut p = ResultPool::new(ContextId(2), "x", 0, "", vec![1]);
        assert!(matches!(p.record_result(rec(5, "m", "a")), Err(ResultError::CrossContext { .. })));
    }

    #[test]
    fn export_import_reexport_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ResultPool::new(ContextId(1), "x", 9, "abc", vec![1, 2]);
        p.record_result(ResultRecord::new(ContextId(1), "m", VirtualTime::from_ticks(1), 0.1 + 0.2, &[("a", "b"), ("c", "d,e")])).unwrap();
        p.record_result(rec(3, "m", "z")).unwrap();
        p.record_runtime(rec(3, "sync_messages", "z")).unwrap();
        p.set_trace(vec![TraceEntry { key: EventKey::new(VirtualTime::from_ticks(4), 1, 2), lp: LpId(3), kind: EventKind::Generic }]);
        p.export(&dir.path().join("a")).unwrap();
        let q = ResultPool::import(&dir.path().join("a")).unwrap();
        q.export(&dir.path().join("b")).unwrap();
        for f in ["manifest.json", "records.csv", "trace.csv", "runtime.csv"] {
            assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
        }
        assert_eq!(q.records()[0].value, 0.1 + 0.2);
    }

    #[test]
    fn truncated_file_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ResultPool::new(ContextId(1), "x", 9, "abc", vec![1]);
        for t in 0..20 {
            p.record_result(rec(t, "m", "z")).unwrap();
        }
        p.export(dir.path()).unwrap();
        let path = dir.path().join("records.csv");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(ResultPool::import(dir.path()), Err(ResultError::Integrity(_))));
    }
}

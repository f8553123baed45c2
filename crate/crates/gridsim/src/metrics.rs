//! Load samples for placement: fixed synthetic values, the host's own load,
//! or a replayed file.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::MetricsError;
use crate::ids::AgentId;
use crate::placement::{performance_value, PerfSample, PerfValue, DEFAULT_WEIGHTS};
use crate::scenario::MetricsMode;

pub trait MetricsSource: Send {
    fn sample(&mut self) -> Result<PerfSample, MetricsError>;
}

/// Always returns the configured sample.
#[derive(Debug, Clone)]
pub struct Synthetic(pub PerfSample);

impl MetricsSource for Synthetic {
    fn sample(&mut self) -> Result<PerfSample, MetricsError> {
        Ok(self.0.clamped())
    }
}

/// Load average and memory use from /proc. Fields are clamped to [0, 1].
#[derive(Debug, Clone, Default)]
pub struct Host;

impl MetricsSource for Host {
    fn sample(&mut self) -> Result<PerfSample, MetricsError> {
        let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1) as f64;
        let load = std::fs::read_to_string("/proc/loadavg")
            .ok()
            .and_then(|s| s.split_whitespace().next().and_then(|x| x.parse::<f64>().ok()))
            .unwrap_or(0.0);
        let mem = std::fs::read_to_string("/proc/meminfo").ok().and_then(|s| mem_used_frac(&s)).unwrap_or(0.0);
        Ok(PerfSample { cpu_load_norm: load / cpus, mem_used_frac: mem, ..PerfSample::idle() }.clamped())
    }
}

fn mem_used_frac(meminfo: &str) -> Option<f64> {
    let field = |name: &str| {
        meminfo
            .lines()
            .find(|l| l.starts_with(name))
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|v| v.parse::<f64>().ok())
    };
    let total = field("MemTotal:")?;
    let avail = field("MemAvailable:")?;
    (total > 0.0).then(|| 1.0 - avail / total)
}

/// Samples from a JSON array file, in order, then the last one forever.
#[derive(Debug, Clone)]
pub struct Replay {
    samples: Vec<PerfSample>,
    pos: usize,
}

impl Replay {
    pub fn new(samples: Vec<PerfSample>) -> Result<Self, MetricsError> {
        if samples.is_empty() {
            return Err(MetricsError::Source("replay file has no samples".into()));
        }
        Ok(Replay { samples, pos: 0 })
    }

    pub fn from_file(path: &Path) -> Result<Self, MetricsError> {
        let bytes = std::fs::read(path).map_err(|e| MetricsError::Source(format!("{}: {e}", path.display())))?;
        let samples = serde_json::from_slice(&bytes).map_err(|e| MetricsError::Source(format!("{}: {e}", path.display())))?;
        Replay::new(samples)
    }
}

impl MetricsSource for Replay {
    fn sample(&mut self) -> Result<PerfSample, MetricsError> {
        let s = self.samples[self.pos.min(self.samples.len() - 1)].clamped();
        self.pos += 1;
        Ok(s)
    }
}

pub fn source_for(mode: &MetricsMode) -> Result<Box<dyn MetricsSource>, MetricsError> {
    Ok(match mode {
        MetricsMode::Synthetic => Box::new(Synthetic(PerfSample::idle())),
        MetricsMode::Host => Box::new(Host),
        MetricsMode::Replay(path) => Box::new(Replay::from_file(Path::new(path))?),
    })
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Turns samples into published values, falling back to the last value
/// (marked stale) when the source fails.
pub struct Publisher {
    agent: AgentId,
    source: Box<dyn MetricsSource>,
    weights: [f64; 4],
    last: Option<PerfValue>,
}

impl Publisher {
    pub fn new(agent: AgentId, source: Box<dyn MetricsSource>) -> Self {
        Publisher { agent, source, weights: DEFAULT_WEIGHTS, last: None }
    }

    pub fn publish(&mut self, now_ms: u64) -> PerfValue {
        let fresh = self
            .source
            .sample()
            .ok()
            .and_then(|s| performance_value(&s, self.weights).ok())
            .map(|value| PerfValue { agent: self.agent, value, sampled_at_ms: now_ms, stale: false });
        let v = match (fresh, &self.last) {
            (Some(v), _) => v,
            (None, Some(prev)) => PerfValue { stale: true, ..prev.clone() },
            (None, None) => PerfValue { agent: self.agent, value: 0.0, sampled_at_ms: now_ms, stale: true },
        };
        self.last = Some(v.clone());
        v
    }
}

#![allow(dead_code)]

use std::path::PathBuf;

use gridsim::model::{build_engine, EngineSpec, Model};
use gridsim::results::{ResultRecord, TraceEntry};
use gridsim::scenario::Scenario;
use gridsim::sync::{Engine, StepOutcome};
use gridsim::{AgentId, ContextId};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn load(name: &str) -> Scenario {
    let bytes = std::fs::read(scenario_path(name)).unwrap();
    Scenario::parse(&bytes).unwrap()
}

pub fn agents(n: u64) -> Vec<AgentId> {
    (1..=n).map(AgentId).collect()
}

pub struct Lockstep {
    pub engines: Vec<Engine>,
}

impl Lockstep {
    pub fn new(s: &Scenario, n: u64) -> Self {
        let model = Model::build(s).unwrap();
        let parts = agents(n);
        let engines = parts
            .iter()
            .map(|&me| build_engine(&model, &EngineSpec::new(s, ContextId(1), me, parts.clone())).unwrap())
            .collect();
        Lockstep { engines }
    }

    /// Step all engines in turn, delivering messages in between. Returns
    /// false if nothing moves for a while before every engine finishes.
    pub fn run(&mut self) -> bool {
        let mut quiet = 0;
        while !self.engines.iter().all(Engine::is_finished) {
            let mut moved = false;
            for i in 0..self.engines.len() {
                let out = self.engines[i].run_steps(64).unwrap();
                moved |= matches!(out, StepOutcome::Processed(_) | StepOutcome::Finished);
                for (to, m) in self.engines[i].take_outbox() {
                    moved = true;
                    let j = self.engines.iter().position(|e| e.me() == to).unwrap();
                    self.engines[j].deliver(m).unwrap();
                }
            }
            quiet = if moved { 0 } else { quiet + 1 };
            if quiet > 50 {
                return false;
            }
        }
        true
    }

    pub fn trace(&mut self) -> Vec<TraceEntry> {
        let mut t: Vec<TraceEntry> = self.engines.iter_mut().flat_map(|e| e.take_trace()).collect();
        t.sort();
        t
    }

    pub fn records(&mut self) -> Vec<ResultRecord> {
        sorted(self.engines.iter_mut().flat_map(|e| e.take_records()).collect())
    }
}

pub fn sorted(mut r: Vec<ResultRecord>) -> Vec<ResultRecord> {
    r.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()).then(a.value.total_cmp(&b.value)));
    r
}

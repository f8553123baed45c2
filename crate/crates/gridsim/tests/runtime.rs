mod common;

use std::time::{Duration, Instant};

use common::load;
use gridsim::client::{run_local, LocalCluster, RunOptions};
use gridsim::error::RunError;
use gridsim::model::Model;
use gridsim::runtime::{CreatePhase, Nack};
use gridsim::sequential::run_sequential;
use gridsim::sync::{SyncBody, SyncMessage};
use gridsim::transport::{Inbound, LocalHub};
use gridsim::wire::{Frame, MsgType};
use gridsim::{AgentId, ContextId, VirtualTime};

fn oracle_trace(name: &str) -> Vec<gridsim::results::TraceEntry> {
    let s = load(name);
    let m = Model::build(&s).unwrap();
    let mut t = run_sequential(&m, ContextId(1), s.horizon).unwrap().trace;
    t.sort();
    t
}

#[test]
fn in_process_and_tcp_match_the_oracle() {
    for name in ["pingpong.json", "star.json", "t0t1.json"] {
        let want = oracle_trace(name);
        let s = load(name);
        for tcp in [false, true] {
            let out = run_local(&s, 3, tcp, RunOptions::default()).unwrap();
            assert_eq!(out.pool.trace(), &want[..], "{name} tcp={tcp}");
        }
    }
}

#[test]
fn single_agent_sends_no_sync_messages() {
    let out = run_local(&load("regional.json"), 1, false, RunOptions::default()).unwrap();
    assert_eq!(out.sync_messages(), 0);
    assert!(out.pool.runtime_total("events_processed") > 0.0);
    let finished: Vec<f64> = out.pool.query("jobs_finished").map(|r| r.value).collect();
    assert_eq!(finished, vec![out.pool.query("job_completion").count() as f64]);
    assert!(out.pool.query("mean_job_completion").count() >= 1);
}

#[test]
fn zero_lookahead_cycle_reports_deadlock() {
    let s = load("deadlock.json");
    let opts = RunOptions { deadlock_timeout: Duration::from_millis(500), ..RunOptions::default() };
    let t0 = Instant::now();
    let err = run_local(&s, 2, false, opts).unwrap_err();
    assert!(matches!(err, RunError::Deadlock { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert!(t0.elapsed() < Duration::from_secs(5));
}

#[test]
fn frames_for_unknown_context_get_a_nack() {
    let s = load("pingpong.json");
    let hub = LocalHub::new();
    let (link, rx) = hub.attach(AgentId(1));
    let agent = gridsim::runtime::Agent::new(
        gridsim::runtime::AgentConfig::new(AgentId(1)),
        link,
        rx,
        gridsim::metrics::Publisher::new(AgentId(1), gridsim::metrics::source_for(&s.metrics).unwrap()),
    )
    .spawn();
    let (me, inbox) = hub.attach(AgentId(9));
    let m = SyncMessage { context: ContextId(7), sender: AgentId(9), seq: 0, body: SyncBody::LvtResponse { guarantee: VirtualTime::ZERO, deferred: false } };
    me.send(AgentId(1), &Frame::new(MsgType::LvtResponse, ContextId(7), &m).unwrap()).unwrap();
    let Inbound::Frame { frame, .. } = inbox.recv_timeout(Duration::from_secs(5)).unwrap() else { panic!() };
    assert_eq!(frame.msg_type, MsgType::Nack);
    assert!(frame.body::<Nack>().unwrap().reason.contains("unknown"));

    // Create, destroy, then talk to the destroyed context.
    let prepare = CreatePhase::Prepare { scenario: Box::new(s.clone()), participants: vec![AgentId(1)], client: AgentId(9) };
    me.send(AgentId(1), &Frame::new(MsgType::ContextCreate, ContextId(7), &prepare).unwrap()).unwrap();
    let Inbound::Frame { frame, .. } = inbox.recv_timeout(Duration::from_secs(5)).unwrap() else { panic!() };
    assert!(matches!(frame.body::<CreatePhase>().unwrap(), CreatePhase::Ready { .. }));
    me.send(AgentId(1), &Frame::new(MsgType::ContextDestroy, ContextId(7), &serde_json::json!({})).unwrap()).unwrap();
    me.send(AgentId(1), &Frame::new(MsgType::LvtResponse, ContextId(7), &m).unwrap()).unwrap();
    let Inbound::Frame { frame, .. } = inbox.recv_timeout(Duration::from_secs(5)).unwrap() else { panic!() };
    assert!(frame.body::<Nack>().unwrap().reason.contains("destroyed"));
    agent.stop();
}

#[test]
fn concurrent_contexts_match_solo_runs() {
    let a = load("pingpong.json");
    let b = load("t0t1.json");
    let solo_a = run_local(&a, 3, false, RunOptions { context: ContextId(11), ..RunOptions::default() }).unwrap();
    let solo_b = run_local(&b, 3, false, RunOptions { context: ContextId(12), ..RunOptions::default() }).unwrap();

    let mut cluster = LocalCluster::in_process(3, &a, Duration::from_secs(5)).unwrap();
    let hub_client = cluster.extra_client(AgentId(100)).unwrap();
    let (ra, rb) = std::thread::scope(|sc| {
        let ha = sc.spawn(|| cluster.run(&a, RunOptions { context: ContextId(11), ..RunOptions::default() }));
        let hb = sc.spawn(|| hub_client.run(&b, &cluster.agents, RunOptions { context: ContextId(12), ..RunOptions::default() }));
        (ha.join().unwrap().unwrap(), hb.join().unwrap().unwrap())
    });
    cluster.shutdown();
    assert_eq!(ra.pool.records_csv().unwrap(), solo_a.pool.records_csv().unwrap());
    assert_eq!(ra.pool.trace_csv().unwrap(), solo_a.pool.trace_csv().unwrap());
    assert_eq!(rb.pool.records_csv().unwrap(), solo_b.pool.records_csv().unwrap());
    assert_eq!(rb.pool.trace_csv().unwrap(), solo_b.pool.trace_csv().unwrap());
}

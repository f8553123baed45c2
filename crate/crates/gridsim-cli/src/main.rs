use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use gridsim::client::{run_local, Client, RunOptions, RunOutput};
use gridsim::error::{RunError, ScenarioError};
use gridsim::metrics::{now_ms, source_for, Publisher, Replay};
use gridsim::registry::{self, RegistryClient, RegistryRequest, DEFAULT_HEARTBEAT, DEFAULT_TTL};
use gridsim::results::ResultPool;
use gridsim::runtime::{Agent, AgentConfig};
use gridsim::scenario::{MetricsMode, Participants, Scenario};
use gridsim::transport::{TcpLink, TcpNode};
use gridsim::{AgentId, ContextId};

const EXIT_VALIDATION: u8 = 2;
const EXIT_ABORT: u8 = 3;

#[derive(Parser)]
#[command(name = "gridsim", version, about = "Distributed conservative simulation of Grid systems")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and collect its results.
    Run(RunArgs),
    /// Check a scenario file and list every problem found.
    Validate { scenario: PathBuf },
    /// Re-export an exported run after checking its integrity.
    Export {
        /// Directory written by `run --out`.
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the samples and performance values a replay file produces.
    ReplayMetrics {
        file: PathBuf,
        #[arg(long, default_value_t = 5)]
        count: usize,
    },
    /// Serve as a simulation agent over TCP.
    Agent(AgentArgs),
    /// Serve the agent registry.
    Registry {
        #[arg(long, default_value = "127.0.0.1:7000")]
        listen: String,
        #[arg(long, default_value_t = DEFAULT_TTL.as_secs())]
        ttl: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Spin up N agents in this process.
    #[arg(long, conflicts_with_all = ["agents", "registry"])]
    local: Option<u64>,
    /// With --local: connect the agents over TCP on localhost.
    #[arg(long)]
    tcp: bool,
    /// Remote agents as `id=host:port`, comma separated.
    #[arg(long, value_delimiter = ',')]
    agents: Vec<String>,
    /// Take the remote agents from a registry.
    #[arg(long)]
    registry: Option<String>,
    /// Directory for manifest.json, records.csv, trace.csv, runtime.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    context: u64,
    /// Seconds blocked with no bound advancing before a run is declared
    /// deadlocked.
    #[arg(long, default_value_t = 5.0)]
    deadlock_timeout: f64,
    /// No progress line.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct AgentArgs {
    #[arg(long)]
    id: u64,
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    #[arg(long)]
    registry: Option<String>,
    /// Static peer file used when the registry cannot be reached.
    #[arg(long)]
    peers: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_HEARTBEAT.as_secs())]
    heartbeat: u64,
    #[arg(long, default_value_t = 5.0)]
    deadlock_timeout: f64,
    /// synthetic, host, or a replay file path.
    #[arg(long, default_value = "synthetic")]
    metrics: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run(a) => run(a),
        Cmd::Validate { scenario } => match load(&scenario) {
            Ok(s) => {
                println!("{}: ok ({})", scenario.display(), s.name);
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Cmd::Export { results, out } => match ResultPool::import(&results).and_then(|p| p.export(&out).map(|_| p)) {
            Ok(p) => {
                println!("exported {} records and {} trace entries to {}", p.records().len(), p.trace().len(), out.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_VALIDATION)
            }
        },
        Cmd::ReplayMetrics { file, count } => replay_metrics(&file, count),
        Cmd::Agent(a) => agent(a),
        Cmd::Registry { listen, ttl } => match TcpListener::bind(&listen) {
            Ok(l) => {
                println!("registry listening on {}", l.local_addr().map(|a| a.to_string()).unwrap_or(listen));
                registry::serve(l, Duration::from_secs(ttl));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {listen}: {e}");
                ExitCode::from(EXIT_ABORT)
            }
        },
    }
}

/// Parse, resolve imports and validate; exit code 2 with every problem
/// listed otherwise.
fn load(path: &Path) -> Result<Scenario, ExitCode> {
    let fail = |msgs: Vec<String>| {
        for m in msgs {
            eprintln!("{}: {m}", path.display());
        }
        ExitCode::from(EXIT_VALIDATION)
    };
    let bytes = std::fs::read(path).map_err(|e| fail(vec![e.to_string()]))?;
    let mut s = Scenario::from_json(&bytes).map_err(|e| fail(vec![e.to_string()]))?;
    let base = path.parent().unwrap_or(Path::new("."));
    s.resolve_imports(base).map_err(|e| fail(vec![format!("initial_placements_from: {e}")]))?;
    match s.validate() {
        Ok(()) => Ok(s),
        Err(ScenarioError::Invalid(errs)) => Err(fail(errs)),
        Err(e) => Err(fail(vec![e.to_string()])),
    }
}

fn run(a: RunArgs) -> ExitCode {
    let s = match load(&a.scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let mut opts = RunOptions {
        context: ContextId(a.context),
        deadlock_timeout: Duration::from_secs_f64(a.deadlock_timeout),
        ..RunOptions::default()
    };
    if !a.quiet {
        let mut last = Instant::now();
        opts.progress = Some(Box::new(move |t, events| {
            if last.elapsed() >= Duration::from_secs(1) {
                last = Instant::now();
                eprintln!("progress: t={:.3}s events={events}", t.as_secs_f64());
            }
        }));
    }
    let started = Instant::now();
    let result = match remote_agents(&a, &s) {
        Ok(None) => {
            let n = a.local.or_else(|| s.participants.local_count().and_then(Result::ok).map(|n| n as u64)).unwrap_or(1);
            run_local(&s, n, a.tcp, opts)
        }
        Ok(Some(agents)) => run_remote(&s, &agents, opts),
        Err(e) => Err(e),
    };
    finish(result, a.out.as_deref(), started)
}

/// Remote agents from flags, the registry, or the scenario's address list.
fn remote_agents(a: &RunArgs, s: &Scenario) -> Result<Option<Vec<(AgentId, SocketAddr)>>, RunError> {
    if a.local.is_some() {
        return Ok(None);
    }
    let specs: Vec<String> = if !a.agents.is_empty() {
        a.agents.clone()
    } else if let Some(r) = &a.registry {
        let client = RegistryClient { server: Some(resolve(r)?), static_file: None };
        let entries = client.lookup().map_err(|e| RunError::ContextCreate(e.to_string()))?;
        entries.into_iter().map(|e| format!("{}={}", e.agent.0, e.addr)).collect()
    } else if let Participants::Remote(list) = &s.participants {
        list.clone()
    } else {
        return Ok(None);
    };
    let mut out = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let (id, addr) = match spec.split_once('=') {
            Some((id, addr)) => (id.parse::<u64>().map_err(|_| RunError::ContextCreate(format!("bad agent id in {spec:?}")))?, addr),
            None => (i as u64 + 1, spec.as_str()),
        };
        out.push((AgentId(id), resolve(addr)?));
    }
    if out.is_empty() {
        return Err(RunError::ContextCreate("no agents to run on".into()));
    }
    Ok(Some(out))
}

fn resolve(addr: &str) -> Result<SocketAddr, RunError> {
    addr.to_socket_addrs()
        .ok()
        .and_then(|mut it| it.next())
        .ok_or_else(|| RunError::ContextCreate(format!("cannot resolve {addr:?}")))
}

fn run_remote(s: &Scenario, agents: &[(AgentId, SocketAddr)], opts: RunOptions) -> Result<RunOutput, RunError> {
    let (node, rx) = TcpNode::bind(AgentId::CLIENT, "0.0.0.0:0")?;
    for (id, addr) in agents {
        node.set_peer(*id, *addr);
    }
    let client = Client::new(Arc::new(TcpLink(node.clone())), rx);
    let ids: Vec<AgentId> = agents.iter().map(|(id, _)| *id).collect();
    let out = client.run(s, &ids, opts);
    node.shutdown();
    out
}

fn finish(result: Result<RunOutput, RunError>, out: Option<&Path>, started: Instant) -> ExitCode {
    match result {
        Ok(r) => {
            if let Some(dir) = out {
                if let Err(e) = r.pool.export(dir) {
                    eprintln!("error: export to {}: {e}", dir.display());
                    return ExitCode::from(EXIT_ABORT);
                }
            }
            println!(
                "finished: events={} records={} sync_messages={} agents={} wall={:.2}s{}",
                r.pool.trace().len(),
                r.pool.records().len(),
                r.sync_messages(),
                r.pool.agents.len(),
                started.elapsed().as_secs_f64(),
                out.map(|d| format!(" out={}", d.display())).unwrap_or_default()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            let diag = diagnostic(&e);
            println!("{diag}");
            if let Some(dir) = out {
                let _ = std::fs::create_dir_all(dir);
                let _ = std::fs::write(dir.join("diagnostic.json"), format!("{diag}\n"));
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// One-line JSON describing why a run failed.
fn diagnostic(e: &RunError) -> serde_json::Value {
    let kind = match e.exit_code() {
        2 => "validation",
        4 => "deadlock",
        _ => "abort",
    };
    let mut v = serde_json::json!({ "status": kind, "exit_code": e.exit_code(), "detail": e.to_string() });
    if let RunError::Deadlock { agent, time, .. } | RunError::Abort { agent, time, .. } = e {
        v["agent"] = serde_json::json!(agent.0);
        v["virtual_time"] = serde_json::json!(time.ticks());
    }
    v
}

fn replay_metrics(file: &Path, count: usize) -> ExitCode {
    let mut r = match Replay::from_file(file) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let mut samples = Vec::new();
    for _ in 0..count {
        use gridsim::metrics::MetricsSource;
        samples.push(r.sample().expect("replay never fails once loaded"));
    }
    let mut p = Publisher::new(AgentId(0), Box::new(gridsim::metrics::Replay::new(samples.clone()).expect("non-empty")));
    for s in samples {
        let v = p.publish(now_ms());
        println!("{}", serde_json::json!({ "sample": s, "value": v.value }));
    }
    ExitCode::SUCCESS
}

fn agent(a: AgentArgs) -> ExitCode {
    let id = AgentId(a.id);
    let mode = match a.metrics.as_str() {
        "synthetic" => MetricsMode::Synthetic,
        "host" => MetricsMode::Host,
        path => MetricsMode::Replay(path.to_string()),
    };
    let source = match source_for(&mode) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let (node, rx) = match TcpNode::bind(id, &a.listen) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {}: {e}", a.listen);
            return ExitCode::from(EXIT_ABORT);
        }
    };
    let addr = node.local_addr().to_string();
    println!("agent {} listening on {addr}", id.0);
    let reg = RegistryClient { server: a.registry.as_deref().and_then(|r| resolve(r).ok()), static_file: a.peers.clone() };
    let cfg = AgentConfig { id, deadlock_timeout: Duration::from_secs_f64(a.deadlock_timeout) };
    let mut heartbeat_pub = Publisher::new(id, match source_for(&mode) {
        Ok(s) => s,
        Err(_) => Box::new(gridsim::metrics::Synthetic(gridsim::placement::PerfSample::idle())),
    });
    let handle = Agent::new(cfg, Arc::new(TcpLink(node.clone())), rx, Publisher::new(id, source)).spawn();
    if reg.server.is_some() || reg.static_file.is_some() {
        let _ = reg.request(&RegistryRequest::Register { agent: id, addr: addr.clone() });
        loop {
            let perf = Some(heartbeat_pub.publish(now_ms()));
            let req = RegistryRequest::Heartbeat { agent: id, perf };
            match reg.request(&req) {
                Ok(entries) => {
                    for e in entries {
                        if let Ok(sa) = resolve(&e.addr) {
                            node.set_peer(e.agent, sa);
                        }
                    }
                }
                Err(e) => log::warn!("registry: {e}"),
            }
            std::thread::sleep(Duration::from_secs(a.heartbeat.max(1)));
        }
    }
    // No registry: serve until killed.
    loop {
        std::thread::sleep(Duration::from_secs(3600));
        let _ = &handle;
    }
}

//! Error types, one per layer.

use thiserror::Error;

use crate::event::EventKey;
use crate::ids::{AgentId, ContextId, LpId};
use crate::lp::LpState;
use crate::time::VirtualTime;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TimeError {
    #[error("virtual time overflow: {base} + {delta}")]
    Overflow { base: i64, delta: i64 },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueError {
    #[error("duplicate event key {0}")]
    DuplicateKey(EventKey),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LpError {
    #[error("illegal transition for {lp}: {from:?} -> {to:?}")]
    IllegalTransition { lp: LpId, from: LpState, to: LpState },
    #[error("no free worker for {0}")]
    NoWorker(LpId),
    #[error("{lp} emitted an event at {at} before its clock {clock}")]
    EmitInPast { lp: LpId, at: VirtualTime, clock: VirtualTime },
    #[error("{lp} emitted an event to {dst} at {at}, inside the lookahead window ending {min}")]
    LookaheadViolation { lp: LpId, dst: LpId, at: VirtualTime, min: VirtualTime },
    #[error(transparent)]
    Time(#[from] TimeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SyncError {
    #[error("{context}: message from unknown sender {sender}")]
    UnknownSender { context: ContextId, sender: AgentId },
    #[error("{context}: message addressed to context {got}")]
    WrongContext { context: ContextId, got: ContextId },
    #[error("duplicate event {0} from transport")]
    Duplicate(EventKey),
    #[error("bound violation: {sender} promised {bound} but sent an event at {got}")]
    BoundViolation { sender: AgentId, bound: VirtualTime, got: VirtualTime },
    #[error("FIFO gap from {sender}: expected sequence {expected}, got {got}")]
    FifoGap { sender: AgentId, expected: u64, got: u64 },
    #[error("causality violation at {lp}: event {key} after {last}")]
    Causality { lp: LpId, key: EventKey, last: EventKey },
    #[error("no route to {0}")]
    NoRoute(LpId),
    #[error("event for {0} which is not hosted here")]
    MissingLp(LpId),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Time(#[from] TimeError),
    #[error("deadlock: {0}")]
    Deadlock(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("performance weights must be nonnegative and sum to 1, got {0:?}")]
    InvalidWeights([f64; 4]),
    #[error("no fresh performance values")]
    NoFreshValues,
    #[error("non-finite performance value for {0}")]
    NonFinite(AgentId),
    #[error("every ranked agent was unreachable")]
    AllUnreachable,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("unknown job {0} on resource")]
    UnknownJob(u64),
    #[error("job {0} already active on resource")]
    DuplicateJob(u64),
    #[error("empty link chain")]
    EmptyChain,
    #[error("unknown resource {0}")]
    UnknownResource(String),
    #[error("demand must be positive")]
    ZeroDemand,
    #[error("recompute at {now} before last recompute {last}")]
    TimeWentBack { now: VirtualTime, last: VirtualTime },
    #[error("object of {size} bytes exceeds capacity {capacity}")]
    TooLarge { size: u64, capacity: u64 },
    #[error("database {0} is full and no mass storage can take the overflow")]
    NoMassStorage(String),
    #[error("component mismatch: update for {got} applied to {expected}")]
    ComponentMismatch { expected: String, got: String },
    #[error("duplicate component id {0}")]
    DuplicateComponent(String),
    #[error("bad payload: {0}")]
    Payload(String),
    #[error("capacity invariant broken on {0}")]
    CapacityInvariant(String),
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0:#04x}")]
    BadType(u8),
    #[error("payload of {0} bytes exceeds the frame limit")]
    Oversize(u32),
    #[error("short read")]
    ShortRead,
    #[error("payload encoding: {0}")]
    Payload(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CodecError {
    /// The frame was bad but fully consumed; the stream can go on.
    pub fn is_skippable(&self) -> bool {
        matches!(self, CodecError::BadVersion(_) | CodecError::BadType(_) | CodecError::Payload(_))
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("{0} is unreachable")]
    Unreachable(AgentId),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry unreachable at {0}")]
    Unreachable(String),
    #[error("static peer file: {0}")]
    StaticFile(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics source failed: {0}")]
    Source(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("malformed scenario: {0}")]
    Malformed(String),
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Error)]
pub enum ResultError {
    #[error("record for {got} does not belong to run {expected}")]
    CrossContext { expected: ContextId, got: ContextId },
    #[error("metric {metric} went back in time: {got} after {last}")]
    OutOfOrder { metric: String, last: VirtualTime, got: VirtualTime },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failure of a whole run, carrying where it happened.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("placement: {0}")]
    Placement(#[from] PlacementError),
    #[error("context creation failed: {0}")]
    ContextCreate(String),
    #[error("deadlock on {agent} at {time}: {detail}")]
    Deadlock { agent: AgentId, time: VirtualTime, detail: String },
    #[error("abort on {agent} at {time}: {detail}")]
    Abort { agent: AgentId, time: VirtualTime, detail: String },
    #[error("peer failure: {0}")]
    PeerFailure(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Results(#[from] ResultError),
}

impl RunError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Scenario(_) => 2,
            RunError::Deadlock { .. } => 4,
            _ => 3,
        }
    }
}

//! Events and their total order.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ids::{ContextId, LpId};
use crate::time::VirtualTime;

/// Total order key of an event: `(timestamp, source, sequence)`.
///
/// `source` is the emitting logical process, so the order does not depend on
/// which agent hosts it. Sequence numbers are strictly increasing per source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventKey {
    pub timestamp: VirtualTime,
    pub source: u64,
    pub sequence: u64,
}

impl EventKey {
    pub fn new(timestamp: VirtualTime, source: u64, sequence: u64) -> Self {
        EventKey { timestamp, source, sequence }
    }

    /// Key of the end-of-run marker at `horizon`; it sorts after every
    /// other event at the same timestamp.
    pub fn end_of_run(horizon: VirtualTime) -> Self {
        EventKey::new(horizon, u64::MAX, u64::MAX)
    }
}

impl fmt::Display for EventKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.timestamp.ticks(), self.source, self.sequence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Generic,
    StartNewJob,
    StateUpdate,
    Wakeup,
    EndOfRun,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Generic => "GENERIC",
            EventKind::StartNewJob => "START_NEW_JOB",
            EventKind::StateUpdate => "STATE_UPDATE",
            EventKind::Wakeup => "WAKEUP",
            EventKind::EndOfRun => "END_OF_RUN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub key: EventKey,
    pub context: ContextId,
    pub src_lp: LpId,
    pub dst_lp: LpId,
    pub kind: EventKind,
    #[serde(serialize_with = "ser_hex", deserialize_with = "de_hex")]
    pub payload: Vec<u8>,
}

impl SimEvent {
    pub fn timestamp(&self) -> VirtualTime {
        self.key.timestamp
    }
}

pub fn event_order_key(e: &SimEvent) -> EventKey {
    e.key
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.cmp(&other.key)
    }
}

fn ser_hex<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(bytes))
}

fn de_hex<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
    let s = String::deserialize(d)?;
    hex::decode(s).map_err(serde::de::Error::custom)
}

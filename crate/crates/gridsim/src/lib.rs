//! Distributed conservative discrete-event simulation of Grid systems.

pub mod client;
pub mod components;
pub mod error;
pub mod event;
pub mod ids;
pub mod lp;
pub mod metrics;
pub mod model;
pub mod placement;
pub mod queue;
pub mod registry;
pub mod results;
pub mod runtime;
pub mod scenario;
pub mod sequential;
pub mod sync;
pub mod time;
pub mod transport;
pub mod wire;

pub use event::{EventKey, EventKind, SimEvent};
pub use ids::{AgentId, ContextId, LpId};
pub use time::VirtualTime;

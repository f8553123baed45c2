use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl From<u64> for $name {
            fn from(v: u64) -> Self {
                $name(v)
            }
        }
    };
}

id_type!(
    /// Identity of a simulation agent. `AgentId(0)` is reserved for the client.
    AgentId,
    "agent-"
);
id_type!(
    /// Identity of a logical process, unique within one context.
    LpId,
    "lp-"
);
id_type!(ContextId, "ctx-");

impl AgentId {
    pub const CLIENT: AgentId = AgentId(0);
}

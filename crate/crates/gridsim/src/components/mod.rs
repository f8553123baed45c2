//! Grid resource models.

pub mod fluid;
pub mod job;
pub mod regional;
pub mod replica;
pub mod storage;

pub use fluid::{FluidModel, Rate, Reschedule, ShareChange};
pub use job::{JobKind, SimJob};
pub use regional::{ComponentKind, ComponentRegistry, LinkKind, RegionalCenterSpec};
pub use replica::{apply_state_update, Replica, StateUpdate};
pub use storage::{DbServer, MassStorage};

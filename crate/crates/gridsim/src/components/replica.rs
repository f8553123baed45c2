//! Replicated component state.
//!
//! The owner of a component bumps `state_version` on every change and sends
//! the new fields to each replica as a `STATE_UPDATE` event; replicas adopt
//! strictly newer versions only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::ids::LpId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentBase {
    pub component_id: String,
    pub owner: LpId,
    pub state_version: u64,
}

pub type Fields = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateUpdate {
    pub component_id: String,
    pub state_version: u64,
    pub fields: Fields,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replica {
    pub base: ComponentBase,
    pub fields: Fields,
}

impl Replica {
    pub fn new(component_id: &str, owner: LpId) -> Self {
        Replica {
            base: ComponentBase { component_id: component_id.to_string(), owner, state_version: 0 },
            fields: Fields::new(),
        }
    }
}

/// Returns whether the replica changed.
pub fn apply_state_update(replica: &mut Replica, update: &StateUpdate) -> Result<bool, ModelError> {
    if replica.base.component_id != update.component_id {
        return Err(ModelError::ComponentMismatch {
            expected: replica.base.component_id.clone(),
            got: update.component_id.clone(),
        });
    }
    if update.state_version <= replica.base.state_version {
        return Ok(false);
    }
    replica.base.state_version = update.state_version;
    replica.fields = update.fields.clone();
    Ok(true)
}

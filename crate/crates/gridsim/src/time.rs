//! Simulated time in integer microseconds.

use std::fmt;
use std::ops::Sub;

use serde::{Deserialize, Serialize};

use crate::error::TimeError;

/// A point in simulated time, one tick per microsecond.
///
/// Negative values never appear on accepted events; they are only used as
/// sentinels inside bound tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtualTime(i64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);
    pub const MAX: VirtualTime = VirtualTime(i64::MAX);

    pub const fn from_ticks(ticks: i64) -> Self {
        VirtualTime(ticks)
    }

    pub const fn from_secs(secs: i64) -> Self {
        VirtualTime(secs * 1_000_000)
    }

    pub const fn from_millis(ms: i64) -> Self {
        VirtualTime(ms * 1_000)
    }

    pub const fn ticks(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn checked_add(self, delta: VirtualTime) -> Result<VirtualTime, TimeError> {
        self.0
            .checked_add(delta.0)
            .map(VirtualTime)
            .ok_or(TimeError::Overflow { base: self.0, delta: delta.0 })
    }

    /// Addition that pins at `MAX`; used for guarantees past the horizon.
    pub fn saturating_add(self, delta: VirtualTime) -> VirtualTime {
        VirtualTime(self.0.saturating_add(delta.0))
    }

    pub fn is_valid_event_time(self) -> bool {
        self.0 >= 0
    }
}

impl Sub for VirtualTime {
    type Output = VirtualTime;

    fn sub(self, rhs: VirtualTime) -> VirtualTime {
        VirtualTime(self.0 - rhs.0)
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overflow_is_an_error() {
        assert!(VirtualTime::MAX.checked_add(VirtualTime::from_ticks(1)).is_err());
        assert_eq!(
            VirtualTime::from_ticks(3).checked_add(VirtualTime::from_ticks(4)).unwrap(),
            VirtualTime::from_ticks(7)
        );
    }

    #[test]
    fn saturating_pins_at_max() {
        assert_eq!(VirtualTime::MAX.saturating_add(VirtualTime::from_ticks(9)), VirtualTime::MAX);
    }
}

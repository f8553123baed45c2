//! Database servers and tape mass storage with LRU migration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::time::VirtualTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredObject {
    pub size: u64,
    pub last_access: VirtualTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbServer {
    pub id: String,
    pub capacity: u64,
    stored: BTreeMap<String, StoredObject>,
    used: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MassStorage {
    pub id: String,
    /// `None` is an unbounded tape library.
    pub capacity: Option<u64>,
    pub mount_latency: VirtualTime,
    stored: BTreeMap<String, StoredObject>,
    used: u64,
}

/// One object moved from disk to tape to make room.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Migration {
    pub object: String,
    pub size: u64,
    /// Index into the mass-storage list passed to the write.
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WriteOutcome {
    pub migrations: Vec<Migration>,
}

impl DbServer {
    pub fn new(id: &str, capacity: u64) -> Self {
        DbServer { id: id.to_string(), capacity, stored: BTreeMap::new(), used: 0 }
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn free(&self) -> u64 {
        self.capacity - self.used
    }

    pub fn objects(&self) -> &BTreeMap<String, StoredObject> {
        &self.stored
    }

    pub fn contains(&self, object: &str) -> bool {
        self.stored.contains_key(object)
    }

    pub fn check_invariant(&self) -> Result<(), ModelError> {
        let sum: u64 = self.stored.values().map(|o| o.size).sum();
        if sum != self.used || self.used > self.capacity {
            return Err(ModelError::CapacityInvariant(self.id.clone()));
        }
        Ok(())
    }

    /// Seed an object without eviction (initial placements).
    pub fn preload(&mut self, object: &str, size: u64, at: VirtualTime) -> Result<(), ModelError> {
        if size > self.free() {
            return Err(ModelError::TooLarge { size, capacity: self.free() });
        }
        self.remove(object);
        self.stored.insert(object.to_string(), StoredObject { size, last_access: at });
        self.used += size;
        Ok(())
    }

    fn remove(&mut self, object: &str) -> Option<StoredObject> {
        let o = self.stored.remove(object)?;
        self.used -= o.size;
        Some(o)
    }

    /// Store `object`, migrating least-recently-accessed objects to mass
    /// storage until it fits. Nothing changes if the write cannot succeed.
    pub fn write(
        &mut self,
        object: &str,
        size: u64,
        now: VirtualTime,
        mass: &mut [MassStorage],
        cursor: &mut usize,
    ) -> Result<WriteOutcome, ModelError> {
        if size > self.capacity {
            return Err(ModelError::TooLarge { size, capacity: self.capacity });
        }
        let existing = self.stored.get(object).map(|o| o.size).unwrap_or(0);
        let mut free = self.free() + existing;
        let mut victims: Vec<(&String, &StoredObject)> = self.stored.iter().filter(|(k, _)| k.as_str() != object).collect();
        victims.sort_by_key(|(k, o)| (o.last_access, (*k).clone()));
        let mut plan = Vec::new();
        let mut tape_free: Vec<Option<u64>> = mass.iter().map(|m| m.capacity.map(|c| c - m.used)).collect();
        let mut cur = *cursor;
        for (k, o) in victims {
            if free >= size {
                break;
            }
            let target = (0..mass.len())
                .map(|i| (cur + i) % mass.len())
                .find(|&i| tape_free[i].map(|f| f >= o.size).unwrap_or(true))
                .ok_or_else(|| ModelError::NoMassStorage(self.id.clone()))?;
            if let Some(f) = tape_free[target].as_mut() {
                *f -= o.size;
            }
            cur = (target + 1) % mass.len();
            free += o.size;
            plan.push(Migration { object: k.clone(), size: o.size, target });
        }
        if free < size {
            return Err(ModelError::NoMassStorage(self.id.clone()));
        }
        for m in &plan {
            let o = self.remove(&m.object).expect("planned victim");
            mass[m.target].put(&m.object, o.size, now);
        }
        if !plan.is_empty() {
            *cursor = cur;
        }
        self.remove(object);
        self.stored.insert(object.to_string(), StoredObject { size, last_access: now });
        self.used += size;
        Ok(WriteOutcome { migrations: plan })
    }

    /// Touch an object for reading; its size if present.
    pub fn read(&mut self, object: &str, now: VirtualTime) -> Option<u64> {
        let o = self.stored.get_mut(object)?;
        o.last_access = now;
        Some(o.size)
    }
}

impl MassStorage {
    pub fn new(id: &str, capacity: Option<u64>, mount_latency: VirtualTime) -> Self {
        MassStorage { id: id.to_string(), capacity, mount_latency, stored: BTreeMap::new(), used: 0 }
    }

    pub fn objects(&self) -> &BTreeMap<String, StoredObject> {
        &self.stored
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    fn put(&mut self, object: &str, size: u64, now: VirtualTime) {
        if let Some(old) = self.stored.insert(object.to_string(), StoredObject { size, last_access: now }) {
            self.used -= old.size;
        }
        self.used += size;
    }

    /// Read from tape: size and the instant the transfer may begin.
    pub fn read(&mut self, object: &str, now: VirtualTime) -> Option<(u64, VirtualTime)> {
        let o = self.stored.get_mut(object)?;
        o.last_access = now;
        Some((o.size, now.saturating_add(self.mount_latency)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vt(t: i64) -> VirtualTime {
        VirtualTime::from_ticks(t)
    }

    #[test]
    fn lru_example() {
        let mut db = DbServer::new("db", 100);
        let mut mass = vec![MassStorage::new("tape", None, VirtualTime::ZERO)];
        let mut cur = 0;
        db.write("O1", 60, vt(5), &mut mass, &mut cur).unwrap();
        db.write("O2", 30, vt(9), &mut mass, &mut cur).unwrap();
        let out = db.write("O3", 40, vt(10), &mut mass, &mut cur).unwrap();
        assert_eq!(out.migrations, vec![Migration { object: "O1".into(), size: 60, target: 0 }]);
        assert_eq!(db.objects().keys().cloned().collect::<Vec<_>>(), vec!["O2", "O3"]);
        assert_eq!(mass[0].objects().keys().cloned().collect::<Vec<_>>(), vec!["O1"]);
    }

    #[test]
    fn fitting_write_migrates_nothing() {
        let mut db = DbServer::new("db", 100);
        let mut cur = 0;
        let out = db.write("a", 50, vt(1), &mut [], &mut cur).unwrap();
        assert!(out.migrations.is_empty());
    }

    #[test]
    fn oversize_and_no_tape() {
        let mut db = DbServer::new("db", 100);
        let mut cur = 0;
        assert!(matches!(db.write("big", 150, vt(1), &mut [], &mut cur), Err(ModelError::TooLarge { .. })));
        db.write("a", 80, vt(1), &mut [], &mut cur).unwrap();
        assert!(matches!(db.write("b", 80, vt(2), &mut [], &mut cur), Err(ModelError::NoMassStorage(_))));
        assert!(db.contains("a"), "failed write must not evict");
    }

    #[test]
    fn overflow_round_robins_over_tapes() {
        let mut db = DbServer::new("db", 10);
        let mut mass = vec![MassStorage::new("t1", Some(10), vt(0)), MassStorage::new("t2", Some(10), vt(0))];
        let mut cur = 0;
        for (i, name) in ["a", "b", "c"].iter().enumerate() {
            db.write(name, 10, vt(i as i64), &mut mass, &mut cur).unwrap();
        }
        assert_eq!(mass[0].objects().len() + mass[1].objects().len(), 2);
        assert!(mass[0].objects().contains_key("a"));
        assert!(mass[1].objects().contains_key("b"));
        assert!(matches!(db.write("d", 10, vt(9), &mut mass, &mut cur), Err(ModelError::NoMassStorage(_))));
        assert!(db.contains("c"));
    }

    #[test]
    fn tape_read_pays_mount_latency() {
        let mut t = MassStorage::new("t", None, vt(500));
        t.put("x", 7, vt(0));
        assert_eq!(t.read("x", vt(100)), Some((7, vt(600))));
    }

    proptest! {
        #[test]
        fn capacity_invariant_under_random_writes(ops in proptest::collection::vec((0u8..20, 1u64..60, any::<bool>()), 1..300)) {
            let mut db = DbServer::new("db", 100);
            let mut mass = vec![MassStorage::new("t", None, vt(0))];
            let mut cur = 0;
            for (i, (obj, size, read)) in ops.into_iter().enumerate() {
                let name = format!("o{obj}");
                if read {
                    db.read(&name, vt(i as i64));
                } else {
                    db.write(&name, size, vt(i as i64), &mut mass, &mut cur).unwrap();
                }
                prop_assert!(db.check_invariant().is_ok());
            }
        }
    }
}

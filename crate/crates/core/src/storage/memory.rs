//! In-memory connector: the node's shared state behind one mutex.

use std::collections::BTreeMap;
use std::sync::Mutex;

use crate::model::{DataRecord, EntityId, KeygroupName, Ttl};

use super::{
    CachedKeygroup, KeygroupArea, MergeStored, ReceiverCursor, StorageConnector, StorageError, StoredRecord,
};

/// Whole-node state shared by every machine of the node.
#[derive(Default)]
pub(crate) struct NodeState {
    pub keygroups: BTreeMap<KeygroupName, KeygroupArea>,
    pub heartbeats: BTreeMap<EntityId, u64>,
    pub responsibility: BTreeMap<EntityId, EntityId>,
}

impl NodeState {
    pub fn area(&mut self, kg: &KeygroupName) -> Result<&mut KeygroupArea, StorageError> {
        self.keygroups
            .get_mut(kg)
            .ok_or_else(|| StorageError::UnknownKeygroup(kg.rendered()))
    }

    pub fn area_ref(&self, kg: &KeygroupName) -> Result<&KeygroupArea, StorageError> {
        self.keygroups
            .get(kg)
            .ok_or_else(|| StorageError::UnknownKeygroup(kg.rendered()))
    }

    pub fn live_machines(&self, now_ms: u64, timeout_ms: u64) -> Vec<EntityId> {
        self.heartbeats
            .iter()
            .filter(|(_, last)| now_ms.saturating_sub(**last) <= timeout_ms)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Storage connector for single-machine nodes and tests: plain maps, no
/// durability.
#[derive(Default)]
pub struct MemoryConnector {
    state: Mutex<NodeState>,
}

impl MemoryConnector {
    pub fn new() -> Self {
        Self::default()
    }
}

impl StorageConnector for MemoryConnector {
    fn register_keygroup(&self, kg: &KeygroupName) -> Result<(), StorageError> {
        let mut state = self.state.lock().unwrap();
        state.keygroups.entry(kg.clone()).or_default();
        Ok(())
    }

    fn is_registered(&self, kg: &KeygroupName) -> Result<bool, StorageError> {
        Ok(self.state.lock().unwrap().keygroups.contains_key(kg))
    }

    fn registered_keygroups(&self) -> Result<Vec<KeygroupName>, StorageError> {
        Ok(self.state.lock().unwrap().keygroups.keys().cloned().collect())
    }

    fn merge_record(&self, kg: &KeygroupName, incoming: &DataRecord, now_ms: u64) -> Result<MergeStored, StorageError> {
        self.state.lock().unwrap().area(kg)?.merge(incoming, now_ms)
    }

    fn get_record(&self, kg: &KeygroupName, key: &str) -> Result<Option<StoredRecord>, StorageError> {
        Ok(self.state.lock().unwrap().area_ref(kg)?.records.get(key).cloned())
    }

    fn hard_delete(&self, kg: &KeygroupName, key: &str) -> Result<(), StorageError> {
        self.state.lock().unwrap().area(kg)?.records.remove(key);
        Ok(())
    }

    fn all_records(&self, kg: &KeygroupName) -> Result<Vec<StoredRecord>, StorageError> {
        Ok(self.state.lock().unwrap().area_ref(kg)?.records.values().cloned().collect())
    }

    fn sweep_expired(&self, kg: &KeygroupName, ttl: Ttl, now_ms: u64) -> Result<Vec<String>, StorageError> {
        Ok(self.state.lock().unwrap().area(kg)?.sweep_expired(ttl, now_ms))
    }

    fn compact_tombstones(&self, kg: &KeygroupName, horizon_ms: u64, now_ms: u64) -> Result<Vec<String>, StorageError> {
        Ok(self.state.lock().unwrap().area(kg)?.compact_tombstones(horizon_ms, now_ms))
    }

    fn allocate_counter(
        &self,
        kg: &KeygroupName,
        record_key: &str,
        buffer_capacity: usize,
    ) -> Result<u64, StorageError> {
        Ok(self.state.lock().unwrap().area(kg)?.allocate(record_key, buffer_capacity))
    }

    fn latest_counter(&self, kg: &KeygroupName) -> Result<u64, StorageError> {
        Ok(self.state.lock().unwrap().area_ref(kg)?.next_counter)
    }

    fn buffered_entries(&self, kg: &KeygroupName) -> Result<Vec<(u64, String)>, StorageError> {
        Ok(self.state.lock().unwrap().area_ref(kg)?.sender_buffer.iter().cloned().collect())
    }

    fn load_cursor(&self, sender: &EntityId, kg: &KeygroupName) -> Result<ReceiverCursor, StorageError> {
        Ok(self
            .state
            .lock()
            .unwrap()
            .area_ref(kg)?
            .cursors
            .get(sender)
            .cloned()
            .unwrap_or_default())
    }

    fn store_cursor(&self, sender: &EntityId, kg: &KeygroupName, cursor: &ReceiverCursor) -> Result<(), StorageError> {
        self.state
            .lock()
            .unwrap()
            .area(kg)?
            .cursors
            .insert(sender.clone(), cursor.clone());
        Ok(())
    }

    fn cursors(&self, kg: &KeygroupName) -> Result<BTreeMap<EntityId, ReceiverCursor>, StorageError> {
        Ok(self.state.lock().unwrap().area_ref(kg)?.cursors.clone())
    }

    fn put_cached_config(&self, cfg: &CachedKeygroup) -> Result<(), StorageError> {
        let mut state = self.state.lock().unwrap();
        let area = state.keygroups.entry(cfg.metadata.name.clone()).or_default();
        area.cached = Some(cfg.clone());
        Ok(())
    }

    fn get_cached_config(&self, kg: &KeygroupName) -> Result<Option<CachedKeygroup>, StorageError> {
        Ok(self
            .state
            .lock()
            .unwrap()
            .keygroups
            .get(kg)
            .and_then(|a| a.cached.clone()))
    }

    fn remove_cached_config(&self, kg: &KeygroupName) -> Result<(), StorageError> {
        if let Some(area) = self.state.lock().unwrap().keygroups.get_mut(kg) {
            area.cached = None;
        }
        Ok(())
    }

    fn cached_configs(&self) -> Result<Vec<CachedKeygroup>, StorageError> {
        Ok(self
            .state
            .lock()
            .unwrap()
            .keygroups
            .values()
            .filter_map(|a| a.cached.clone())
            .collect())
    }

    fn heartbeat(&self, machine: &EntityId, now_ms: u64) -> Result<(), StorageError> {
        self.state.lock().unwrap().heartbeats.insert(machine.clone(), now_ms);
        Ok(())
    }

    fn live_machines(&self, now_ms: u64, timeout_ms: u64) -> Result<Vec<EntityId>, StorageError> {
        Ok(self.state.lock().unwrap().live_machines(now_ms, timeout_ms))
    }

    fn store_responsibility(&self, map: &BTreeMap<EntityId, EntityId>) -> Result<(), StorageError> {
        self.state.lock().unwrap().responsibility = map.clone();
        Ok(())
    }

    fn load_responsibility(&self) -> Result<BTreeMap<EntityId, EntityId>, StorageError> {
        Ok(self.state.lock().unwrap().responsibility.clone())
    }

    fn trigger_append(&self, kg: &KeygroupName, record: &DataRecord) -> Result<(), StorageError> {
        self.state.lock().unwrap().area(kg)?.trigger.append(record.clone());
        Ok(())
    }

    fn trigger_register_consumer(&self, kg: &KeygroupName, consumer: &str) -> Result<(), StorageError> {
        self.state.lock().unwrap().area(kg)?.trigger.register(consumer);
        Ok(())
    }

    fn trigger_poll(&self, kg: &KeygroupName, consumer: &str, max: usize) -> Result<Vec<DataRecord>, StorageError> {
        Ok(self.state.lock().unwrap().area(kg)?.trigger.poll(consumer, max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EntityId;
    use std::collections::BTreeMap as Map;

    fn kg() -> KeygroupName {
        KeygroupName::parse("app.user.temps").unwrap()
    }

    fn record(key: &str, ts: u64) -> DataRecord {
        let mut fields = Map::new();
        fields.insert("v".to_string(), ts.to_string().into_bytes());
        DataRecord::new(kg(), key, fields, ts, EntityId::node("n1").unwrap()).unwrap()
    }

    #[test]
    fn put_then_get_returns_same_record() {
        let conn = MemoryConnector::new();
        conn.register_keygroup(&kg()).unwrap();
        let rec = record("k1", 5);
        conn.merge_record(&kg(), &rec, 100).unwrap();
        let stored = conn.get_record(&kg(), "k1").unwrap().unwrap();
        assert_eq!(stored.record, rec);
        assert_eq!(stored.local_write_time, 100);
    }

    #[test]
    fn get_unknown_key_is_absent() {
        let conn = MemoryConnector::new();
        conn.register_keygroup(&kg()).unwrap();
        assert!(conn.get_record(&kg(), "ghost").unwrap().is_none());
    }

    #[test]
    fn unknown_keygroup_errors() {
        let conn = MemoryConnector::new();
        assert!(matches!(
            conn.get_record(&kg(), "k"),
            Err(StorageError::UnknownKeygroup(_))
        ));
    }

    #[test]
    fn merge_path_keeps_newer_record() {
        // Oracle: the reference LWW executor keeps the max-(ts, writer)
        // record regardless of arrival order.
        let conn = MemoryConnector::new();
        conn.register_keygroup(&kg()).unwrap();
        conn.merge_record(&kg(), &record("k", 5), 10).unwrap();
        conn.merge_record(&kg(), &record("k", 3), 20).unwrap();
        let stored = conn.get_record(&kg(), "k").unwrap().unwrap();
        assert_eq!(stored.record.update_timestamp, 5);
        // Losing merge leaves the local write time untouched.
        assert_eq!(stored.local_write_time, 10);
    }

    #[test]
    fn sweep_expired_honors_disabled_and_boundaries() {
        let conn = MemoryConnector::new();
        conn.register_keygroup(&kg()).unwrap();
        for i in 0..10 {
            conn.merge_record(&kg(), &record(&format!("k{i}"), i), 0).unwrap();
        }
        // Disabled: nothing expires ever.
        assert!(conn.sweep_expired(&kg(), Ttl::Disabled, u64::MAX).unwrap().is_empty());
        // 10-minute buffer: nothing at write+599999.
        assert!(conn
            .sweep_expired(&kg(), Ttl::Millis(600_000), 599_999)
            .unwrap()
            .is_empty());
        // Past the boundary all 10 go.
        let removed = conn.sweep_expired(&kg(), Ttl::Millis(600_000), 600_001).unwrap();
        assert_eq!(removed.len(), 10);
        // Idempotent: immediate second sweep removes nothing.
        assert!(conn
            .sweep_expired(&kg(), Ttl::Millis(600_000), 600_001)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn ttl_zero_expires_anything_older_than_now() {
        let conn = MemoryConnector::new();
        conn.register_keygroup(&kg()).unwrap();
        conn.merge_record(&kg(), &record("k", 1), 99).unwrap();
        let removed = conn.sweep_expired(&kg(), Ttl::Millis(0), 100).unwrap();
        assert_eq!(removed, vec!["k".to_string()]);
    }

    #[test]
    fn counter_allocation_is_sequential_and_buffer_bounded() {
        let conn = MemoryConnector::new();
        conn.register_keygroup(&kg()).unwrap();
        for i in 1..=10u64 {
            assert_eq!(conn.allocate_counter(&kg(), &format!("k{i}"), 4).unwrap(), i);
        }
        assert_eq!(conn.latest_counter(&kg()).unwrap(), 10);
        let buffered = conn.buffered_entries(&kg()).unwrap();
        assert_eq!(
            buffered.iter().map(|(c, _)| *c).collect::<Vec<_>>(),
            vec![7, 8, 9, 10],
            "buffer keeps exactly the last B counters"
        );
    }

    #[test]
    fn heartbeats_and_live_machines() {
        let conn = MemoryConnector::new();
        let m = |n: &str| EntityId::machine(n).unwrap();
        conn.heartbeat(&m("m2"), 1000).unwrap();
        conn.heartbeat(&m("m1"), 1000).unwrap();
        conn.heartbeat(&m("m3"), 1000).unwrap();
        let live = conn.live_machines(2000, 5000).unwrap();
        assert_eq!(live, vec![m("m1"), m("m2"), m("m3")], "sorted by name");
        conn.heartbeat(&m("m2"), 1000).unwrap();
        let live = conn.live_machines(7000, 5000).unwrap();
        assert!(live.is_empty() || !live.contains(&m("m2")) || live.len() < 3);
        // One machine silent beyond timeout is excluded.
        conn.heartbeat(&m("m1"), 7000).unwrap();
        conn.heartbeat(&m("m3"), 7000).unwrap();
        let live = conn.live_machines(7001, 5000).unwrap();
        assert_eq!(live, vec![m("m1"), m("m3")]);
        // All silent: empty.
        assert!(conn.live_machines(1_000_000, 10).unwrap().is_empty());
    }

    #[test]
    fn tombstone_compaction_purges_old_tombstones_only() {
        let conn = MemoryConnector::new();
        conn.register_keygroup(&kg()).unwrap();
        let t = DataRecord::tombstone(kg(), "dead", 5, EntityId::node("n1").unwrap()).unwrap();
        conn.merge_record(&kg(), &t, 0).unwrap();
        conn.merge_record(&kg(), &record("live", 5), 0).unwrap();
        assert!(conn.compact_tombstones(&kg(), 1000, 500).unwrap().is_empty());
        let purged = conn.compact_tombstones(&kg(), 1000, 1500).unwrap();
        assert_eq!(purged, vec!["dead".to_string()]);
        assert!(conn.get_record(&kg(), "live").unwrap().is_some());
    }
}

//! File-backed connector: a directory per node with one write-ahead
//! journal per keygroup plus a membership area.
//!
//! Layout:
//!
//! ```text
//! <root>/<keygroup-rendered-name>/journal   length-prefixed journal frames
//! <root>/membership/<machine-name>.hb      last heartbeat, 8 bytes BE
//! <root>/membership/responsibility.bin     current responsibility map
//! ```
//!
//! Every mutation is appended and synced before it is applied and
//! acknowledged, so an acknowledged write survives kill-and-reopen. A torn
//! final frame (an unacknowledged write) is discarded on replay.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::model::{DataRecord, EntityId, KeygroupName, Ttl};
use crate::wire::{self, DecodeError, Reader, WireDecode, WireEncode};

use super::memory::NodeState;
use super::{CachedKeygroup, KeygroupArea, MergeStored, ReceiverCursor, StorageConnector, StorageError, StoredRecord};

const JOURNAL_TAG: u8 = 0x50;

#[derive(Debug, Clone, PartialEq)]
enum JournalEntry {
    Register,
    Merge { record: DataRecord, now_ms: u64 },
    HardDelete { key: String },
    Alloc { key: String, capacity: u64 },
    Cursor { sender: EntityId, cursor: ReceiverCursor },
    CachedConfig(CachedKeygroup),
    RemoveCachedConfig,
    SweepRemoved { keys: Vec<String> },
    CompactRemoved { keys: Vec<String> },
}

impl WireEncode for JournalEntry {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, JOURNAL_TAG);
        match self {
            JournalEntry::Register => wire::put_u8(out, 0),
            JournalEntry::Merge { record, now_ms } => {
                wire::put_u8(out, 1);
                record.encode_into(out);
                wire::put_u64(out, *now_ms);
            }
            JournalEntry::HardDelete { key } => {
                wire::put_u8(out, 2);
                wire::put_str(out, key);
            }
            JournalEntry::Alloc { key, capacity } => {
                wire::put_u8(out, 3);
                wire::put_str(out, key);
                wire::put_u64(out, *capacity);
            }
            JournalEntry::Cursor { sender, cursor } => {
                wire::put_u8(out, 4);
                sender.encode_into(out);
                cursor.encode_into(out);
            }
            JournalEntry::CachedConfig(cfg) => {
                wire::put_u8(out, 5);
                cfg.encode_into(out);
            }
            JournalEntry::RemoveCachedConfig => wire::put_u8(out, 6),
            JournalEntry::SweepRemoved { keys } => {
                wire::put_u8(out, 7);
                wire::put_list(out, keys);
            }
            JournalEntry::CompactRemoved { keys } => {
                wire::put_u8(out, 8);
                wire::put_list(out, keys);
            }
        }
    }
}

impl WireDecode for JournalEntry {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(JOURNAL_TAG)?;
        match r.get_u8()? {
            0 => Ok(JournalEntry::Register),
            1 => Ok(JournalEntry::Merge {
                record: DataRecord::decode_from(r)?,
                now_ms: r.get_u64()?,
            }),
            2 => Ok(JournalEntry::HardDelete { key: r.get_str()? }),
            3 => Ok(JournalEntry::Alloc {
                key: r.get_str()?,
                capacity: r.get_u64()?,
            }),
            4 => Ok(JournalEntry::Cursor {
                sender: EntityId::decode_from(r)?,
                cursor: ReceiverCursor::decode_from(r)?,
            }),
            5 => Ok(JournalEntry::CachedConfig(CachedKeygroup::decode_from(r)?)),
            6 => Ok(JournalEntry::RemoveCachedConfig),
            7 => Ok(JournalEntry::SweepRemoved { keys: wire::get_list(r)? }),
            8 => Ok(JournalEntry::CompactRemoved { keys: wire::get_list(r)? }),
            b => Err(DecodeError::invalid(format!("bad journal entry kind {b:#04x}"))),
        }
    }
}

fn apply_entry(area: &mut KeygroupArea, entry: JournalEntry) {
    match entry {
        JournalEntry::Register => {}
        JournalEntry::Merge { record, now_ms } => {
            let _ = area.merge(&record, now_ms);
        }
        JournalEntry::HardDelete { key } => {
            area.records.remove(&key);
        }
        JournalEntry::Alloc { key, capacity } => {
            area.allocate(&key, capacity as usize);
        }
        JournalEntry::Cursor { sender, cursor } => {
            area.cursors.insert(sender, cursor);
        }
        JournalEntry::CachedConfig(cfg) => area.cached = Some(cfg),
        JournalEntry::RemoveCachedConfig => area.cached = None,
        JournalEntry::SweepRemoved { keys } | JournalEntry::CompactRemoved { keys } => {
            for key in keys {
                area.records.remove(&key);
            }
        }
    }
}

struct FileInner {
    state: NodeState,
    journals: BTreeMap<KeygroupName, File>,
    root: PathBuf,
}

impl FileInner {
    fn journal_path(root: &Path, kg: &KeygroupName) -> PathBuf {
        root.join(kg.rendered()).join("journal")
    }

    fn membership_dir(root: &Path) -> PathBuf {
        root.join("membership")
    }

    fn append(&mut self, kg: &KeygroupName, entry: &JournalEntry) -> Result<(), StorageError> {
        let file = self
            .journals
            .get_mut(kg)
            .ok_or_else(|| StorageError::UnknownKeygroup(kg.rendered()))?;
        let body = entry.encode();
        let mut frame = Vec::with_capacity(body.len() + 4);
        frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
        frame.extend_from_slice(&body);
        file.write_all(&frame).map_err(StorageError::failure)?;
        file.sync_data().map_err(StorageError::failure)?;
        Ok(())
    }

    /// Journals the entry, then applies it; the write is acknowledged only
    /// after it is on disk.
    fn journal_and_apply(&mut self, kg: &KeygroupName, entry: JournalEntry) -> Result<(), StorageError> {
        if !self.state.keygroups.contains_key(kg) {
            return Err(StorageError::UnknownKeygroup(kg.rendered()));
        }
        self.append(kg, &entry)?;
        let area = self.state.area(kg)?;
        apply_entry(area, entry);
        Ok(())
    }
}

/// Durable storage connector. One instance per node; machines of the node
/// share it.
pub struct FileConnector {
    inner: Mutex<FileInner>,
}

impl FileConnector {
    /// Opens (or creates) a node storage directory, replaying all journals.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(StorageError::failure)?;
        fs::create_dir_all(FileInner::membership_dir(&root)).map_err(StorageError::failure)?;

        let mut state = NodeState::default();
        let mut journals = BTreeMap::new();

        for dir_entry in fs::read_dir(&root).map_err(StorageError::failure)? {
            let dir_entry = dir_entry.map_err(StorageError::failure)?;
            if !dir_entry.path().is_dir() {
                continue;
            }
            let name = dir_entry.file_name().to_string_lossy().to_string();
            if name == "membership" {
                continue;
            }
            let Ok(kg) = KeygroupName::parse(&name) else {
                continue; // not a keygroup area
            };
            let path = FileInner::journal_path(&root, &kg);
            let mut area = KeygroupArea::default();
            if path.exists() {
                let mut bytes = Vec::new();
                File::open(&path)
                    .and_then(|mut f| f.read_to_end(&mut bytes))
                    .map_err(StorageError::failure)?;
                for entry in read_frames(&bytes) {
                    apply_entry(&mut area, entry);
                }
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(StorageError::failure)?;
            state.keygroups.insert(kg.clone(), area);
            journals.insert(kg, file);
        }

        // Membership area: heartbeat files plus the responsibility map.
        let membership = FileInner::membership_dir(&root);
        for dir_entry in fs::read_dir(&membership).map_err(StorageError::failure)? {
            let dir_entry = dir_entry.map_err(StorageError::failure)?;
            let file_name = dir_entry.file_name().to_string_lossy().to_string();
            if let Some(machine_name) = file_name.strip_suffix(".hb") {
                let Ok(machine) = EntityId::machine(machine_name) else {
                    continue;
                };
                let mut buf = Vec::new();
                if File::open(dir_entry.path())
                    .and_then(|mut f| f.read_to_end(&mut buf))
                    .is_ok()
                    && buf.len() == 8
                {
                    let ms = u64::from_be_bytes(buf[..8].try_into().unwrap());
                    state.heartbeats.insert(machine, ms);
                }
            } else if file_name == "responsibility.bin" {
                let mut buf = Vec::new();
                if File::open(dir_entry.path())
                    .and_then(|mut f| f.read_to_end(&mut buf))
                    .is_ok()
                {
                    if let Ok(map) = decode_responsibility(&buf) {
                        state.responsibility = map;
                    }
                }
            }
        }

        Ok(FileConnector {
            inner: Mutex::new(FileInner { state, journals, root }),
        })
    }
}

/// Reads journal frames, stopping cleanly at a torn tail.
fn read_frames(bytes: &[u8]) -> Vec<JournalEntry> {
    let mut entries = Vec::new();
    let mut pos = 0usize;
    while pos + 4 <= bytes.len() {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if pos + 4 + len > bytes.len() {
            log::warn!("journal has a torn final frame ({} trailing bytes); discarding", bytes.len() - pos);
            break;
        }
        match JournalEntry::decode(&bytes[pos + 4..pos + 4 + len]) {
            Ok(entry) => entries.push(entry),
            Err(e) => {
                log::warn!("journal frame failed to decode ({e}); stopping replay");
                break;
            }
        }
        pos += 4 + len;
    }
    entries
}

fn encode_responsibility(map: &BTreeMap<EntityId, EntityId>) -> Vec<u8> {
    let mut out = vec![wire::WIRE_FORMAT_V1];
    wire::put_u32(&mut out, map.len() as u32);
    for (remote, machine) in map {
        remote.encode_into(&mut out);
        machine.encode_into(&mut out);
    }
    out
}

fn decode_responsibility(bytes: &[u8]) -> Result<BTreeMap<EntityId, EntityId>, DecodeError> {
    let mut r = Reader::new(bytes);
    let version = r.get_u8()?;
    if version != wire::WIRE_FORMAT_V1 {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let n = r.get_u32()? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..n {
        let remote = EntityId::decode_from(&mut r)?;
        let machine = EntityId::decode_from(&mut r)?;
        map.insert(remote, machine);
    }
    r.finish()?;
    Ok(map)
}

impl StorageConnector for FileConnector {
    fn register_keygroup(&self, kg: &KeygroupName) -> Result<(), StorageError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.state.keygroups.contains_key(kg) {
            return Ok(());
        }
        let dir = inner.root.join(kg.rendered());
        fs::create_dir_all(&dir).map_err(StorageError::failure)?;
        let path = FileInner::journal_path(&inner.root, kg);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(StorageError::failure)?;
        inner.state.keygroups.insert(kg.clone(), KeygroupArea::default());
        inner.journals.insert(kg.clone(), file);
        inner.append(kg, &JournalEntry::Register)?;
        Ok(())
    }

    fn is_registered(&self, kg: &KeygroupName) -> Result<bool, StorageError> {
        Ok(self.inner.lock().unwrap().state.keygroups.contains_key(kg))
    }

    fn registered_keygroups(&self) -> Result<Vec<KeygroupName>, StorageError> {
        Ok(self.inner.lock().unwrap().state.keygroups.keys().cloned().collect())
    }

    fn merge_record(&self, kg: &KeygroupName, incoming: &DataRecord, now_ms: u64) -> Result<MergeStored, StorageError> {
        let mut inner = self.inner.lock().unwrap();
        if !inner.state.keygroups.contains_key(kg) {
            return Err(StorageError::UnknownKeygroup(kg.rendered()));
        }
        inner.append(kg, &JournalEntry::Merge {
            record: incoming.clone(),
            now_ms,
        })?;
        inner.state.area(kg)?.merge(incoming, now_ms)
    }

    fn get_record(&self, kg: &KeygroupName, key: &str) -> Result<Option<StoredRecord>, StorageError> {
        Ok(self.inner.lock().unwrap().state.area_ref(kg)?.records.get(key).cloned())
    }

    fn hard_delete(&self, kg: &KeygroupName, key: &str) -> Result<(), StorageError> {
        self.inner
            .lock()
            .unwrap()
            .journal_and_apply(kg, JournalEntry::HardDelete { key: key.to_string() })
    }

    fn all_records(&self, kg: &KeygroupName) -> Result<Vec<StoredRecord>, StorageError> {
        Ok(self.inner.lock().unwrap().state.area_ref(kg)?.records.values().cloned().collect())
    }

    fn sweep_expired(&self, kg: &KeygroupName, ttl: Ttl, now_ms: u64) -> Result<Vec<String>, StorageError> {
        let mut inner = self.inner.lock().unwrap();
        let expired: Vec<String> = {
            let area = inner.state.area_ref(kg)?;
            area.records
                .iter()
                .filter(|(_, s)| ttl.expired(s.local_write_time, now_ms))
                .map(|(k, _)| k.clone())
                .collect()
        };
        if !expired.is_empty() {
            inner.journal_and_apply(kg, JournalEntry::SweepRemoved { keys: expired.clone() })?;
        }
        Ok(expired)
    }

    fn compact_tombstones(&self, kg: &KeygroupName, horizon_ms: u64, now_ms: u64) -> Result<Vec<String>, StorageError> {
        let mut inner = self.inner.lock().unwrap();
        let purged: Vec<String> = {
            let area = inner.state.area_ref(kg)?;
            area.records
                .iter()
                .filter(|(_, s)| s.record.deleted && now_ms.saturating_sub(s.local_write_time) > horizon_ms)
                .map(|(k, _)| k.clone())
                .collect()
        };
        if !purged.is_empty() {
            inner.journal_and_apply(kg, JournalEntry::CompactRemoved { keys: purged.clone() })?;
        }
        Ok(purged)
    }

    fn allocate_counter(
        &self,
        kg: &KeygroupName,
        record_key: &str,
        buffer_capacity: usize,
    ) -> Result<u64, StorageError> {
        let mut inner = self.inner.lock().unwrap();
        if !inner.state.keygroups.contains_key(kg) {
            return Err(StorageError::UnknownKeygroup(kg.rendered()));
        }
        inner.append(kg, &JournalEntry::Alloc {
            key: record_key.to_string(),
            capacity: buffer_capacity as u64,
        })?;
        Ok(inner.state.area(kg)?.allocate(record_key, buffer_capacity))
    }

    fn latest_counter(&self, kg: &KeygroupName) -> Result<u64, StorageError> {
        Ok(self.inner.lock().unwrap().state.area_ref(kg)?.next_counter)
    }

    fn buffered_entries(&self, kg: &KeygroupName) -> Result<Vec<(u64, String)>, StorageError> {
        Ok(self
            .inner
            .lock()
            .unwrap()
            .state
            .area_ref(kg)?
            .sender_buffer
            .iter()
            .cloned()
            .collect())
    }

    fn load_cursor(&self, sender: &EntityId, kg: &KeygroupName) -> Result<ReceiverCursor, StorageError> {
        Ok(self
            .inner
            .lock()
            .unwrap()
            .state
            .area_ref(kg)?
            .cursors
            .get(sender)
            .cloned()
            .unwrap_or_default())
    }

    fn store_cursor(&self, sender: &EntityId, kg: &KeygroupName, cursor: &ReceiverCursor) -> Result<(), StorageError> {
        self.inner.lock().unwrap().journal_and_apply(kg, JournalEntry::Cursor {
            sender: sender.clone(),
            cursor: cursor.clone(),
        })
    }

    fn cursors(&self, kg: &KeygroupName) -> Result<BTreeMap<EntityId, ReceiverCursor>, StorageError> {
        Ok(self.inner.lock().unwrap().state.area_ref(kg)?.cursors.clone())
    }

    fn put_cached_config(&self, cfg: &CachedKeygroup) -> Result<(), StorageError> {
        let kg = cfg.metadata.name.clone();
        self.register_keygroup(&kg)?;
        self.inner
            .lock()
            .unwrap()
            .journal_and_apply(&kg, JournalEntry::CachedConfig(cfg.clone()))
    }

    fn get_cached_config(&self, kg: &KeygroupName) -> Result<Option<CachedKeygroup>, StorageError> {
        Ok(self
            .inner
            .lock()
            .unwrap()
            .state
            .keygroups
            .get(kg)
            .and_then(|a| a.cached.clone()))
    }

    fn remove_cached_config(&self, kg: &KeygroupName) -> Result<(), StorageError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.state.keygroups.contains_key(kg) {
            inner.journal_and_apply(kg, JournalEntry::RemoveCachedConfig)?;
        }
        Ok(())
    }

    fn cached_configs(&self) -> Result<Vec<CachedKeygroup>, StorageError> {
        Ok(self
            .inner
            .lock()
            .unwrap()
            .state
            .keygroups
            .values()
            .filter_map(|a| a.cached.clone())
            .collect())
    }

    fn heartbeat(&self, machine: &EntityId, now_ms: u64) -> Result<(), StorageError> {
        let mut inner = self.inner.lock().unwrap();
        let path = FileInner::membership_dir(&inner.root).join(format!("{}.hb", machine.name()));
        let mut file = File::create(&path).map_err(StorageError::failure)?;
        file.write_all(&now_ms.to_be_bytes()).map_err(StorageError::failure)?;
        file.sync_data().map_err(StorageError::failure)?;
        inner.state.heartbeats.insert(machine.clone(), now_ms);
        Ok(())
    }

    fn live_machines(&self, now_ms: u64, timeout_ms: u64) -> Result<Vec<EntityId>, StorageError> {
        Ok(self.inner.lock().unwrap().state.live_machines(now_ms, timeout_ms))
    }

    fn store_responsibility(&self, map: &BTreeMap<EntityId, EntityId>) -> Result<(), StorageError> {
        let mut inner = self.inner.lock().unwrap();
        let path = FileInner::membership_dir(&inner.root).join("responsibility.bin");
        let mut file = File::create(&path).map_err(StorageError::failure)?;
        file.write_all(&encode_responsibility(map)).map_err(StorageError::failure)?;
        file.sync_data().map_err(StorageError::failure)?;
        inner.state.responsibility = map.clone();
        Ok(())
    }

    fn load_responsibility(&self) -> Result<BTreeMap<EntityId, EntityId>, StorageError> {
        Ok(self.inner.lock().unwrap().state.responsibility.clone())
    }

    fn trigger_append(&self, kg: &KeygroupName, record: &DataRecord) -> Result<(), StorageError> {
        self.inner.lock().unwrap().state.area(kg)?.trigger.append(record.clone());
        Ok(())
    }

    fn trigger_register_consumer(&self, kg: &KeygroupName, consumer: &str) -> Result<(), StorageError> {
        self.inner.lock().unwrap().state.area(kg)?.trigger.register(consumer);
        Ok(())
    }

    fn trigger_poll(&self, kg: &KeygroupName, consumer: &str, max: usize) -> Result<Vec<DataRecord>, StorageError> {
        Ok(self.inner.lock().unwrap().state.area(kg)?.trigger.poll(consumer, max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
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
    fn survives_kill_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let conn = FileConnector::open(dir.path()).unwrap();
            conn.register_keygroup(&kg()).unwrap();
            conn.merge_record(&kg(), &record("k1", 5), 100).unwrap();
            conn.merge_record(&kg(), &record("k2", 6), 110).unwrap();
            conn.allocate_counter(&kg(), "k1", 4).unwrap();
            conn.allocate_counter(&kg(), "k2", 4).unwrap();
            let mut cursor = ReceiverCursor::default();
            cursor.observe(3);
            conn.store_cursor(&EntityId::node("remote").unwrap(), &kg(), &cursor).unwrap();
            conn.heartbeat(&EntityId::machine("m1").unwrap(), 500).unwrap();
            // Dropped without any explicit close: simulated crash.
        }
        let conn = FileConnector::open(dir.path()).unwrap();
        assert!(conn.is_registered(&kg()).unwrap());
        assert_eq!(conn.get_record(&kg(), "k1").unwrap().unwrap().record, record("k1", 5));
        assert_eq!(conn.get_record(&kg(), "k2").unwrap().unwrap().local_write_time, 110);
        assert_eq!(conn.latest_counter(&kg()).unwrap(), 2);
        assert_eq!(conn.buffered_entries(&kg()).unwrap().len(), 2);
        let cursor = conn.load_cursor(&EntityId::node("remote").unwrap(), &kg()).unwrap();
        assert_eq!(cursor.highest_applied, 3);
        assert_eq!(cursor.pending, std::collections::BTreeSet::from([1, 2]));
        assert_eq!(conn.live_machines(500, 100).unwrap().len(), 1);
    }

    #[test]
    fn torn_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        {
            let conn = FileConnector::open(dir.path()).unwrap();
            conn.register_keygroup(&kg()).unwrap();
            conn.merge_record(&kg(), &record("ok", 1), 10).unwrap();
        }
        // Simulate a crash mid-append: garbage half-frame at the tail.
        let journal = dir.path().join(kg().rendered()).join("journal");
        let mut file = OpenOptions::new().append(true).open(&journal).unwrap();
        file.write_all(&[0, 0, 1, 0, 0xde, 0xad]).unwrap();
        drop(file);
        let conn = FileConnector::open(dir.path()).unwrap();
        assert!(conn.get_record(&kg(), "ok").unwrap().is_some());
    }

    #[test]
    fn sweep_is_durable() {
        let dir = tempfile::tempdir().unwrap();
        {
            let conn = FileConnector::open(dir.path()).unwrap();
            conn.register_keygroup(&kg()).unwrap();
            conn.merge_record(&kg(), &record("gone", 1), 0).unwrap();
            let removed = conn.sweep_expired(&kg(), Ttl::Millis(10), 100).unwrap();
            assert_eq!(removed, vec!["gone".to_string()]);
        }
        let conn = FileConnector::open(dir.path()).unwrap();
        assert!(conn.get_record(&kg(), "gone").unwrap().is_none());
    }

    #[test]
    fn responsibility_map_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let map: BTreeMap<EntityId, EntityId> = BTreeMap::from([
            (EntityId::node("r1").unwrap(), EntityId::machine("m1").unwrap()),
            (EntityId::node("r2").unwrap(), EntityId::machine("m2").unwrap()),
        ]);
        {
            let conn = FileConnector::open(dir.path()).unwrap();
            conn.store_responsibility(&map).unwrap();
        }
        let conn = FileConnector::open(dir.path()).unwrap();
        assert_eq!(conn.load_responsibility().unwrap(), map);
    }
}

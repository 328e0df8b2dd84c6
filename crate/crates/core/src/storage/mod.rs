//! Node-local shared persistence tier behind a connector interface.
//!
//! A connector instance IS the node's shared state: every machine of a node
//! operates on the same connector and observes the same records, counters,
//! receiver cursors, cached configuration, machine heartbeats and trigger
//! queues. Two implementations are provided: [`memory::MemoryConnector`]
//! and [`file::FileConnector`] (one write-ahead journal per keygroup).

pub mod file;
pub mod memory;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::model::{DataRecord, EntityId, KeygroupMetadata, KeygroupName, SecretVersion, Ttl};
use crate::wire::{self, DecodeError, Reader, WireDecode, WireEncode};

const STORED_RECORD_TAG: u8 = 0x0E;
const CURSOR_TAG: u8 = 0x0F;
const CACHED_KEYGROUP_TAG: u8 = 0x10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StorageError {
    #[error("keygroup {0} is not known to this node")]
    UnknownKeygroup(String),
    #[error("storage connector failure: {0}")]
    ConnectorFailure(String),
}

impl StorageError {
    pub fn failure(msg: impl std::fmt::Display) -> Self {
        StorageError::ConnectorFailure(msg.to_string())
    }
}

/// A record as stored at one node: the replicated record plus the local
/// write time that drives this node's TTL clock. `local_write_time` is set
/// by the storing node and never copied from remote nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRecord {
    pub record: DataRecord,
    pub local_write_time: u64,
}

impl WireEncode for StoredRecord {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, STORED_RECORD_TAG);
        self.record.encode_into(out);
        wire::put_u64(out, self.local_write_time);
    }
}

impl WireDecode for StoredRecord {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(STORED_RECORD_TAG)?;
        Ok(StoredRecord {
            record: DataRecord::decode_from(r)?,
            local_write_time: r.get_u64()?,
        })
    }
}

/// Outcome of merging an incoming record into the store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeStored {
    pub stored: StoredRecord,
    /// False when the incoming record lost the merge and the stored value
    /// is unchanged.
    pub changed: bool,
}

/// Per-(sender node, keygroup) receive state: the counter high-watermark,
/// the set of missing counters awaiting recovery, the counters given up as
/// permanently lost, and retry pacing for the recovery loop.
///
/// Every counter in `1..=highest_applied` is in exactly one of three
/// states: applied (the default), pending, or lost.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReceiverCursor {
    pub highest_applied: u64,
    pub pending: BTreeSet<u64>,
    pub lost: BTreeSet<u64>,
    pub next_retry_ms: u64,
    pub retry_attempt: u32,
}

/// What to do with an arriving counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CounterDecision {
    /// Apply the update; `new_gaps` lists counters newly detected missing.
    Apply { new_gaps: Vec<u64> },
    /// Already applied (or superseded); ignore.
    Duplicate,
}

impl ReceiverCursor {
    /// Classifies an arriving counter and updates the bookkeeping.
    /// A counter is applied at most once; `highest_applied` never
    /// decreases.
    pub fn observe(&mut self, counter: u64) -> CounterDecision {
        if self.pending.remove(&counter) {
            return CounterDecision::Apply { new_gaps: Vec::new() };
        }
        if self.lost.remove(&counter) {
            // Arrived after being written off; apply it and amend the books.
            return CounterDecision::Apply { new_gaps: Vec::new() };
        }
        if counter <= self.highest_applied {
            return CounterDecision::Duplicate;
        }
        let mut new_gaps = Vec::new();
        for missing in (self.highest_applied + 1)..counter {
            self.pending.insert(missing);
            new_gaps.push(missing);
        }
        self.highest_applied = counter;
        CounterDecision::Apply { new_gaps }
    }

    /// Marks counters up to `latest` (the sender's advertised high-water
    /// mark) as pending when they were never seen. Used by the
    /// receiver-initiated sync probe to catch tail losses that no later
    /// message would ever reveal.
    pub fn extend_to(&mut self, latest: u64) -> Vec<u64> {
        let mut new_gaps = Vec::new();
        if latest > self.highest_applied {
            for missing in (self.highest_applied + 1)..=latest {
                self.pending.insert(missing);
                new_gaps.push(missing);
            }
            self.highest_applied = latest;
        }
        new_gaps
    }

    /// Resolves one pending gap after a recovery exchange.
    pub fn resolve(&mut self, counter: u64, recovered: bool) {
        self.pending.remove(&counter);
        if !recovered {
            self.lost.insert(counter);
        }
    }

    /// Counters accounted as applied so far.
    pub fn applied_counters(&self) -> BTreeSet<u64> {
        (1..=self.highest_applied)
            .filter(|c| !self.pending.contains(c) && !self.lost.contains(c))
            .collect()
    }
}

impl WireEncode for ReceiverCursor {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, CURSOR_TAG);
        wire::put_u64(out, self.highest_applied);
        wire::put_u32(out, self.pending.len() as u32);
        for c in &self.pending {
            wire::put_u64(out, *c);
        }
        wire::put_u32(out, self.lost.len() as u32);
        for c in &self.lost {
            wire::put_u64(out, *c);
        }
        wire::put_u64(out, self.next_retry_ms);
        wire::put_u64(out, self.retry_attempt as u64);
    }
}

impl WireDecode for ReceiverCursor {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(CURSOR_TAG)?;
        let highest_applied = r.get_u64()?;
        let n = r.get_u32()? as usize;
        let mut pending = BTreeSet::new();
        for _ in 0..n {
            pending.insert(r.get_u64()?);
        }
        let n = r.get_u32()? as usize;
        let mut lost = BTreeSet::new();
        for _ in 0..n {
            lost.insert(r.get_u64()?);
        }
        Ok(ReceiverCursor {
            highest_applied,
            pending,
            lost,
            next_retry_ms: r.get_u64()?,
            retry_attempt: r.get_u64()? as u32,
        })
    }
}

/// The node-local copy of a keygroup's configuration: current metadata
/// (including the current secret) plus superseded secrets retained for a
/// grace window so in-flight pre-rotation messages still open.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedKeygroup {
    pub metadata: KeygroupMetadata,
    /// (secret, retire_at_ms) pairs for superseded versions.
    pub old_secrets: Vec<(SecretVersion, u64)>,
    pub fetched_at_ms: u64,
}

impl CachedKeygroup {
    pub fn new(metadata: KeygroupMetadata, fetched_at_ms: u64) -> Self {
        CachedKeygroup {
            metadata,
            old_secrets: Vec::new(),
            fetched_at_ms,
        }
    }

    /// All secrets usable at `now_ms`: the current one plus unretired old
    /// versions.
    pub fn usable_secrets(&self, now_ms: u64) -> Vec<&SecretVersion> {
        let mut out = vec![&self.metadata.secret];
        for (secret, retire_at) in &self.old_secrets {
            if *retire_at > now_ms {
                out.push(secret);
            }
        }
        out
    }

    /// Replaces the metadata, retaining the previous secret for
    /// `grace_ms` when the secret version changed.
    pub fn adopt(&mut self, metadata: KeygroupMetadata, now_ms: u64, grace_ms: u64) {
        if metadata.secret.version != self.metadata.secret.version {
            let old = self.metadata.secret.clone();
            self.old_secrets.push((old, now_ms + grace_ms));
        }
        self.old_secrets.retain(|(_, retire_at)| *retire_at > now_ms);
        self.metadata = metadata;
        self.fetched_at_ms = now_ms;
    }
}

impl WireEncode for CachedKeygroup {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, CACHED_KEYGROUP_TAG);
        self.metadata.encode_into(out);
        wire::put_u32(out, self.old_secrets.len() as u32);
        for (secret, retire_at) in &self.old_secrets {
            secret.encode_into(out);
            wire::put_u64(out, *retire_at);
        }
        wire::put_u64(out, self.fetched_at_ms);
    }
}

impl WireDecode for CachedKeygroup {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(CACHED_KEYGROUP_TAG)?;
        let metadata = KeygroupMetadata::decode_from(r)?;
        let n = r.get_u32()? as usize;
        let mut old_secrets = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let secret = SecretVersion::decode_from(r)?;
            let retire_at = r.get_u64()?;
            old_secrets.push((secret, retire_at));
        }
        Ok(CachedKeygroup {
            metadata,
            old_secrets,
            fetched_at_ms: r.get_u64()?,
        })
    }
}

/// The shared persistence tier of one node. All machines of the node go
/// through the same connector; per-record operations are atomic,
/// cross-record operations make no atomicity promise.
pub trait StorageConnector: Send + Sync {
    fn register_keygroup(&self, kg: &KeygroupName) -> Result<(), StorageError>;
    fn is_registered(&self, kg: &KeygroupName) -> Result<bool, StorageError>;
    fn registered_keygroups(&self) -> Result<Vec<KeygroupName>, StorageError>;

    /// Atomically merges `incoming` into the record area under the
    /// last-writer-wins rule; the local write time is refreshed whenever
    /// the stored value changes.
    fn merge_record(&self, kg: &KeygroupName, incoming: &DataRecord, now_ms: u64) -> Result<MergeStored, StorageError>;
    /// Raw read: tombstoned and TTL-expired entries are still visible here;
    /// see [`get_visible`] for client-facing semantics.
    fn get_record(&self, kg: &KeygroupName, key: &str) -> Result<Option<StoredRecord>, StorageError>;
    fn hard_delete(&self, kg: &KeygroupName, key: &str) -> Result<(), StorageError>;
    /// All stored records, key-sorted.
    fn all_records(&self, kg: &KeygroupName) -> Result<Vec<StoredRecord>, StorageError>;
    /// Removes exactly the records whose local age exceeds `ttl`; returns
    /// the removed keys, key-sorted. A disabled TTL removes nothing.
    fn sweep_expired(&self, kg: &KeygroupName, ttl: Ttl, now_ms: u64) -> Result<Vec<String>, StorageError>;
    /// Removes tombstones older than the compaction horizon.
    fn compact_tombstones(&self, kg: &KeygroupName, horizon_ms: u64, now_ms: u64) -> Result<Vec<String>, StorageError>;

    /// Atomically allocates the next update counter for this node's
    /// `(node, keygroup)` stream and pushes `(counter, record_key)` into
    /// the bounded sender buffer.
    fn allocate_counter(&self, kg: &KeygroupName, record_key: &str, buffer_capacity: usize)
        -> Result<u64, StorageError>;
    /// The most recently allocated counter (0 when none).
    fn latest_counter(&self, kg: &KeygroupName) -> Result<u64, StorageError>;
    /// Current sender-buffer contents, oldest first.
    fn buffered_entries(&self, kg: &KeygroupName) -> Result<Vec<(u64, String)>, StorageError>;

    fn load_cursor(&self, sender: &EntityId, kg: &KeygroupName) -> Result<ReceiverCursor, StorageError>;
    fn store_cursor(&self, sender: &EntityId, kg: &KeygroupName, cursor: &ReceiverCursor)
        -> Result<(), StorageError>;
    fn cursors(&self, kg: &KeygroupName) -> Result<BTreeMap<EntityId, ReceiverCursor>, StorageError>;

    fn put_cached_config(&self, cfg: &CachedKeygroup) -> Result<(), StorageError>;
    fn get_cached_config(&self, kg: &KeygroupName) -> Result<Option<CachedKeygroup>, StorageError>;
    fn remove_cached_config(&self, kg: &KeygroupName) -> Result<(), StorageError>;
    fn cached_configs(&self) -> Result<Vec<CachedKeygroup>, StorageError>;

    fn heartbeat(&self, machine: &EntityId, now_ms: u64) -> Result<(), StorageError>;
    /// Machines whose last heartbeat is within `timeout_ms` of `now_ms`,
    /// sorted by machine name.
    fn live_machines(&self, now_ms: u64, timeout_ms: u64) -> Result<Vec<EntityId>, StorageError>;
    fn store_responsibility(&self, map: &BTreeMap<EntityId, EntityId>) -> Result<(), StorageError>;
    fn load_responsibility(&self) -> Result<BTreeMap<EntityId, EntityId>, StorageError>;

    /// Appends an applied update to the keygroup's trigger stream.
    /// Trigger streams are transient (not journaled).
    fn trigger_append(&self, kg: &KeygroupName, record: &DataRecord) -> Result<(), StorageError>;
    /// Registers a consumer; it will observe every update appended after
    /// registration exactly once.
    fn trigger_register_consumer(&self, kg: &KeygroupName, consumer: &str) -> Result<(), StorageError>;
    fn trigger_poll(&self, kg: &KeygroupName, consumer: &str, max: usize) -> Result<Vec<DataRecord>, StorageError>;
}

/// Client-facing read semantics on top of a raw stored entry: absent for
/// never-written or expired keys; tombstones (deleted=true) are returned
/// as-is while they remain within the compaction horizon.
pub fn get_visible(stored: Option<StoredRecord>, ttl: Ttl, now_ms: u64) -> Option<DataRecord> {
    let stored = stored?;
    if ttl.expired(stored.local_write_time, now_ms) {
        return None;
    }
    Some(stored.record)
}

/// Shared in-memory materialization of one keygroup's area. Both
/// connectors operate on this; the file connector journals mutations
/// before applying them.
#[derive(Default)]
pub(crate) struct KeygroupArea {
    pub records: BTreeMap<String, StoredRecord>,
    pub next_counter: u64,
    pub sender_buffer: VecDeque<(u64, String)>,
    pub cursors: BTreeMap<EntityId, ReceiverCursor>,
    pub cached: Option<CachedKeygroup>,
    pub trigger: TriggerArea,
}

impl KeygroupArea {
    pub fn merge(&mut self, incoming: &DataRecord, now_ms: u64) -> Result<MergeStored, StorageError> {
        let key = incoming.record_key.clone();
        let current = self.records.get(&key);
        let merged = crate::model::merge_record(current.map(|s| &s.record), incoming)
            .map_err(StorageError::failure)?;
        let changed = current.map(|s| s.record != merged).unwrap_or(true);
        let stored = if changed {
            let stored = StoredRecord {
                record: merged,
                local_write_time: now_ms,
            };
            self.records.insert(key, stored.clone());
            stored
        } else {
            self.records.get(&key).expect("unchanged record exists").clone()
        };
        Ok(MergeStored { stored, changed })
    }

    pub fn allocate(&mut self, record_key: &str, capacity: usize) -> u64 {
        self.next_counter += 1;
        let counter = self.next_counter;
        self.sender_buffer.push_back((counter, record_key.to_string()));
        while self.sender_buffer.len() > capacity {
            self.sender_buffer.pop_front();
        }
        counter
    }

    pub fn sweep_expired(&mut self, ttl: Ttl, now_ms: u64) -> Vec<String> {
        let expired: Vec<String> = self
            .records
            .iter()
            .filter(|(_, s)| ttl.expired(s.local_write_time, now_ms))
            .map(|(k, _)| k.clone())
            .collect();
        for key in &expired {
            self.records.remove(key);
        }
        expired
    }

    pub fn compact_tombstones(&mut self, horizon_ms: u64, now_ms: u64) -> Vec<String> {
        let purged: Vec<String> = self
            .records
            .iter()
            .filter(|(_, s)| s.record.deleted && now_ms.saturating_sub(s.local_write_time) > horizon_ms)
            .map(|(k, _)| k.clone())
            .collect();
        for key in &purged {
            self.records.remove(key);
        }
        purged
    }
}

/// Transient trigger stream: an ordered queue of applied updates plus one
/// offset per registered consumer.
#[derive(Default)]
pub(crate) struct TriggerArea {
    queue: Vec<DataRecord>,
    /// Index of queue\[0\] in the absolute stream.
    base: u64,
    consumers: BTreeMap<String, u64>,
    /// Guard against unbounded growth when a consumer stalls.
    max_buffered: usize,
}

impl TriggerArea {
    const DEFAULT_MAX: usize = 100_000;

    pub fn append(&mut self, record: DataRecord) {
        if self.consumers.is_empty() {
            // Nothing will ever read it; advance the stream position only.
            self.base += 1;
            return;
        }
        self.queue.push(record);
        let cap = if self.max_buffered == 0 { Self::DEFAULT_MAX } else { self.max_buffered };
        while self.queue.len() > cap {
            self.queue.remove(0);
            self.base += 1;
        }
    }

    pub fn register(&mut self, consumer: &str) {
        let end = self.base + self.queue.len() as u64;
        self.consumers.entry(consumer.to_string()).or_insert(end);
    }

    pub fn poll(&mut self, consumer: &str, max: usize) -> Vec<DataRecord> {
        let Some(offset) = self.consumers.get_mut(consumer) else {
            return Vec::new();
        };
        let start = (*offset).max(self.base);
        let idx = (start - self.base) as usize;
        let take = max.min(self.queue.len().saturating_sub(idx));
        let out: Vec<DataRecord> = self.queue[idx..idx + take].to_vec();
        *offset = start + take as u64;
        self.gc();
        out
    }

    fn gc(&mut self) {
        let min_offset = self.consumers.values().copied().min().unwrap_or(self.base);
        let drop_n = (min_offset.saturating_sub(self.base)) as usize;
        if drop_n > 0 {
            self.queue.drain(..drop_n.min(self.queue.len()));
            self.base += drop_n as u64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cursor_in_order_stream_has_no_gaps() {
        let mut cursor = ReceiverCursor::default();
        for c in 1..=3 {
            assert_eq!(cursor.observe(c), CounterDecision::Apply { new_gaps: vec![] });
        }
        assert_eq!(cursor.highest_applied, 3);
        assert!(cursor.pending.is_empty());
        assert_eq!(cursor.applied_counters(), (1..=3).collect());
    }

    #[test]
    fn cursor_detects_gap_and_resolves_on_late_arrival() {
        let mut cursor = ReceiverCursor::default();
        assert_eq!(cursor.observe(2), CounterDecision::Apply { new_gaps: vec![1] });
        assert!(cursor.pending.contains(&1));
        // Counter 1 arrives late (reordered): resolves the gap locally.
        assert_eq!(cursor.observe(1), CounterDecision::Apply { new_gaps: vec![] });
        assert!(cursor.pending.is_empty());
        // And again: now a duplicate.
        assert_eq!(cursor.observe(1), CounterDecision::Duplicate);
    }

    #[test]
    fn cursor_gap_range_and_loss_partition() {
        let mut cursor = ReceiverCursor::default();
        cursor.observe(1);
        assert_eq!(cursor.observe(5), CounterDecision::Apply { new_gaps: vec![2, 3, 4] });
        cursor.resolve(2, true);
        cursor.resolve(3, false);
        assert_eq!(cursor.pending, BTreeSet::from([4]));
        assert_eq!(cursor.lost, BTreeSet::from([3]));
        let applied = cursor.applied_counters();
        // 1, 2, 5 applied; 4 pending; 3 lost: the three sets partition 1..=5.
        assert_eq!(applied, BTreeSet::from([1, 2, 5]));
        let mut all: BTreeSet<u64> = applied;
        all.extend(&cursor.pending);
        all.extend(&cursor.lost);
        assert_eq!(all, (1..=5).collect());
    }

    #[test]
    fn cursor_extend_to_reveals_tail_gaps() {
        let mut cursor = ReceiverCursor::default();
        cursor.observe(1);
        let gaps = cursor.extend_to(4);
        assert_eq!(gaps, vec![2, 3, 4]);
        assert_eq!(cursor.extend_to(4), Vec::<u64>::new());
    }

    #[test]
    fn trigger_area_consumer_sees_only_post_registration_updates() {
        let mut area = TriggerArea::default();
        let kg = KeygroupName::parse("a.b").unwrap();
        let rec = |k: &str| {
            DataRecord::new(kg.clone(), k, BTreeMap::new(), 1, EntityId::node("n").unwrap()).unwrap()
        };
        area.append(rec("before"));
        area.register("c1");
        area.append(rec("x1"));
        area.append(rec("x2"));
        let got = area.poll("c1", 10);
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].record_key, "x1");
        assert!(area.poll("c1", 10).is_empty());
    }

    #[test]
    fn cached_keygroup_retains_old_secret_through_grace_window() {
        let meta_v1 = sample_meta(1, 1);
        let mut cached = CachedKeygroup::new(meta_v1, 0);
        let meta_v2 = sample_meta(2, 2);
        cached.adopt(meta_v2, 1000, 60_000);
        let versions: Vec<u64> = cached.usable_secrets(30_000).iter().map(|s| s.version).collect();
        assert_eq!(versions, vec![2, 1]);
        let versions: Vec<u64> = cached.usable_secrets(61_001).iter().map(|s| s.version).collect();
        assert_eq!(versions, vec![2]);
    }

    fn sample_meta(version: u64, secret_version: u64) -> KeygroupMetadata {
        KeygroupMetadata {
            name: KeygroupName::parse("a.b").unwrap(),
            version,
            replica_nodes: BTreeMap::from([(
                EntityId::node("n1").unwrap(),
                crate::model::ReplicaConfig { ttl: Ttl::Disabled },
            )]),
            trigger_nodes: BTreeSet::new(),
            authorized_clients: BTreeSet::new(),
            secret: SecretVersion {
                version: secret_version,
                key_material: [secret_version as u8; 16],
            },
        }
    }
}

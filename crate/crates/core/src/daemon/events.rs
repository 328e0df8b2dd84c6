//! Observability events emitted by a daemon. The simulation harness
//! collects these to build staleness/latency tables, loss accounting and
//! scenario assertions; deployments may log them.

use std::sync::Arc;

use crate::model::{EntityId, KeygroupName};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyPath {
    /// Applied straight off the topic subscription.
    Direct,
    /// Applied through a recovery exchange with the sender.
    Recovery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossReason {
    /// Counter evicted from the sender's bounded buffer before recovery.
    Evicted,
    /// Counter still buffered but the record already expired at the sender.
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecryptFailure {
    UnknownSecretVersion(u64),
    AuthenticationFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ClientOpKind {
    Put,
    Get,
    Delete,
    TriggerPoll,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DaemonEvent {
    /// A local client write committed (publish returned).
    WriteCommitted {
        node: EntityId,
        machine: EntityId,
        keygroup: KeygroupName,
        record_key: String,
        counter: u64,
        deleted: bool,
        commit_ms: u64,
    },
    /// A remote update was merged into local storage.
    UpdateApplied {
        node: EntityId,
        machine: EntityId,
        sender: EntityId,
        keygroup: KeygroupName,
        record_key: String,
        counter: u64,
        apply_ms: u64,
        via: ApplyPath,
    },
    DuplicateIgnored {
        node: EntityId,
        sender: EntityId,
        keygroup: KeygroupName,
        counter: u64,
    },
    GapsDetected {
        node: EntityId,
        sender: EntityId,
        keygroup: KeygroupName,
        counters: Vec<u64>,
    },
    CounterLost {
        node: EntityId,
        sender: EntityId,
        keygroup: KeygroupName,
        counter: u64,
        reason: LossReason,
    },
    DecryptFailed {
        node: EntityId,
        machine: EntityId,
        sender: EntityId,
        keygroup: KeygroupName,
        counter: u64,
        reason: DecryptFailure,
    },
    ConfigRefreshed {
        node: EntityId,
        keygroup: KeygroupName,
        version: u64,
        secret_version: u64,
    },
    ConfigPurged {
        node: EntityId,
        keygroup: KeygroupName,
    },
    NamingUnreachable {
        node: EntityId,
        machine: EntityId,
    },
    SubscriptionChanged {
        machine: EntityId,
        keygroup: KeygroupName,
        subscribed: bool,
    },
    StatePulled {
        node: EntityId,
        keygroup: KeygroupName,
        from: EntityId,
        records: usize,
    },
    /// Timing breakdown of one served client operation: end-to-end span
    /// plus the inner storage-call span, on the same clock.
    ClientOpServed {
        node: EntityId,
        machine: EntityId,
        keygroup: KeygroupName,
        op: ClientOpKind,
        start_ms: u64,
        storage_start_ms: u64,
        storage_end_ms: u64,
        end_ms: u64,
        ok: bool,
    },
    SweepExpired {
        node: EntityId,
        keygroup: KeygroupName,
        keys: Vec<String>,
    },
}

pub type EventSink = Arc<dyn Fn(&DaemonEvent) + Send + Sync>;

pub fn null_sink() -> EventSink {
    Arc::new(|_| {})
}

//! Topic-based publish/subscribe plus direct request/response channels.
//!
//! Two backends honor the same interface: [`sim::SimNet`], an in-process
//! bus on a virtual clock with a deterministic fault-injection layer, and
//! [`socket::SocketBus`], a localhost TCP bus for demo deployments. The
//! broker retains nothing: recovery from lost or reordered messages is
//! entirely the replication protocol's job.

pub mod sim;
pub mod socket;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::model::KeygroupName;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
    #[error("endpoint name already registered: {0}")]
    EndpointTaken(String),
    #[error("connection failed: {0}")]
    ConnectionFailed(String),
}

/// A named transport endpoint. One endpoint per machine (plus one per
/// client session and one for the naming service). `addr` is only
/// meaningful on the socket backend.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Endpoint {
    pub name: String,
    pub addr: String,
}

impl Endpoint {
    pub fn named(name: impl Into<String>) -> Self {
        Endpoint {
            name: name.into(),
            addr: String::new(),
        }
    }

    pub fn with_addr(name: impl Into<String>, addr: impl Into<String>) -> Self {
        Endpoint {
            name: name.into(),
            addr: addr.into(),
        }
    }
}

/// A pub/sub topic. There is exactly one topic per keygroup: the topic
/// string is the keygroup name's dotted rendering, bijectively.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Topic(String);

impl Topic {
    pub fn for_keygroup(kg: &KeygroupName) -> Self {
        Topic(kg.rendered())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn keygroup(&self) -> Result<KeygroupName, crate::model::ModelError> {
        KeygroupName::parse(&self.0)
    }
}

/// Handler for messages delivered on a subscription. Invocations for one
/// endpoint are serialized; different endpoints may run concurrently.
pub type PubHandler = Arc<dyn Fn(&Topic, &[u8]) + Send + Sync>;

/// Handler for direct requests addressed to an endpoint. Returns the
/// response payload.
pub type ReqHandler = Arc<dyn Fn(&str, &[u8]) -> Vec<u8> + Send + Sync>;

/// One-shot scheduled callback. Recurring activities reschedule themselves.
pub type TimerCallback = Box<dyn FnOnce() + Send>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubscriptionHandle {
    pub id: u64,
    pub endpoint: String,
    pub topic: Topic,
}

/// Message transport between endpoints.
pub trait Bus: Send + Sync {
    /// Registers an endpoint and its direct-request handler.
    fn register_endpoint(&self, endpoint: &Endpoint, handler: ReqHandler) -> Result<(), TransportError>;

    fn unregister_endpoint(&self, name: &str);

    /// Subscribes an endpoint to a topic. `publishers` lists the endpoints
    /// expected to publish on it; the socket backend dials them, the
    /// in-process broker ignores the list.
    fn subscribe(
        &self,
        subscriber: &Endpoint,
        topic: &Topic,
        publishers: &[Endpoint],
        handler: PubHandler,
    ) -> Result<SubscriptionHandle, TransportError>;

    fn unsubscribe(&self, handle: &SubscriptionHandle);

    /// Fire-and-forget publish: returns after local enqueue; delivery to
    /// each current subscriber is attempted independently and no error is
    /// surfaced to the sender.
    fn publish(&self, sender: &Endpoint, topic: &Topic, payload: &[u8]);

    /// Synchronous round-trip to another endpoint, subject to the fault
    /// layer; returns [`TransportError::Timeout`] on expiry.
    fn request(&self, from: &Endpoint, to: &Endpoint, payload: &[u8], timeout_ms: u64)
        -> Result<Vec<u8>, TransportError>;
}

/// Time source. The simulated clock additionally supports charging
/// virtual service time from within a handler.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;

    /// Advances virtual time by `ms` to model local processing cost.
    /// No-op on wall clocks.
    fn charge_ms(&self, _ms: u64) {}
}

/// Deferred execution. On the simulated runtime callbacks run on the
/// virtual clock; on the thread runtime they run on real timers.
pub trait Timers: Send + Sync {
    fn schedule_ms(&self, delay_ms: u64, f: TimerCallback);
}

/// Delay applied to each delivery attempt, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayModel {
    Fixed(u64),
    /// Uniformly random in `min..=max`.
    Uniform { min: u64, max: u64 },
}

impl DelayModel {
    fn mean(&self) -> u64 {
        match self {
            DelayModel::Fixed(ms) => *ms,
            DelayModel::Uniform { min, max } => (min + max) / 2,
        }
    }
}

/// A bidirectional partition between two endpoint sets during a virtual
/// time window. Messages crossing an active partition are lost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionWindow {
    pub side_a: BTreeSet<String>,
    pub side_b: BTreeSet<String>,
    pub start_ms: u64,
    pub end_ms: u64,
}

impl PartitionWindow {
    pub fn cuts(&self, from: &str, to: &str, now_ms: u64) -> bool {
        if now_ms < self.start_ms || now_ms >= self.end_ms {
            return false;
        }
        (self.side_a.contains(from) && self.side_b.contains(to))
            || (self.side_b.contains(from) && self.side_a.contains(to))
    }
}

/// Transport-level fault schedule. Identical seed and schedule produce an
/// identical delivery trace.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultProfile {
    pub drop_probability: f64,
    pub delay: DelayModel,
    pub reorder_probability: f64,
    /// Maximum extra delay added to a reordered delivery. Zero picks a
    /// default derived from the base delay.
    pub reorder_window_ms: u64,
    pub partitions: Vec<PartitionWindow>,
    pub rng_seed: u64,
}

impl FaultProfile {
    pub fn faultless(seed: u64) -> Self {
        FaultProfile {
            drop_probability: 0.0,
            delay: DelayModel::Fixed(0),
            reorder_probability: 0.0,
            reorder_window_ms: 0,
            partitions: Vec::new(),
            rng_seed: seed,
        }
    }

    pub fn effective_reorder_window(&self) -> u64 {
        if self.reorder_window_ms > 0 {
            self.reorder_window_ms
        } else {
            4 * self.delay.mean() + 5
        }
    }
}

/// Wall-clock runtime backing demo deployments: real epoch time plus
/// detached sleeper threads for timers.
pub struct ThreadRuntime;

impl Clock for ThreadRuntime {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("system clock before epoch")
            .as_millis() as u64
    }
}

impl Timers for ThreadRuntime {
    fn schedule_ms(&self, delay_ms: u64, f: TimerCallback) {
        std::thread::spawn(move || {
            std::thread::sleep(std::time::Duration::from_millis(delay_ms));
            f();
        });
    }
}

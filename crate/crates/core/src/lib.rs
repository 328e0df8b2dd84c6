//! Application-controlled data replication for fog topologies.
//!
//! Data is organized into *keygroups*: named sets of records that share
//! replication policy, per-replica TTLs, a symmetric secret and access
//! control. *Nodes* (groups of collocated machines over one shared storage
//! tier) take the role of replica nodes, trigger nodes, or both per
//! keygroup. A strictly consistent naming service assigns identities and
//! holds keygroup metadata; update propagation between nodes is
//! fire-and-forget pub/sub with counter-stamped messages, receiver-side gap
//! detection, and direct-channel recovery from bounded sender buffers.
//!
//! The crate is organized along those seams:
//!
//! - [`model`]: shared domain types and the last-writer-wins merge rule
//! - [`wire`]: canonical binary encoding (wire and journal format)
//! - [`crypto`]: record sealing, control envelopes, secret rotation
//! - [`transport`]: pub/sub + request channels; a deterministic in-process
//!   bus with fault injection, and a localhost socket bus
//! - [`storage`]: the node-local shared persistence tier behind a connector
//!   interface (in-memory and file-backed)
//! - [`naming`]: the strictly consistent registry for ids, tombstones and
//!   keygroup metadata
//! - [`daemon`]: the per-machine runtime gluing all of the above together
//! - [`client`]: client sessions and the declarative keygroup API

pub mod client;
pub mod crypto;
pub mod daemon;
pub mod model;
pub mod naming;
pub mod proto;
pub mod storage;
pub mod transport;
pub mod wire;

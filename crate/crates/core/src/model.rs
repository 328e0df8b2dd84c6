//! Shared domain types: identifiers, keygroup names and metadata, data
//! records, update envelopes, and the last-writer-wins merge rule.
//!
//! All types here are immutable values after construction and can be shared
//! freely between concurrent activities.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::wire::WireEncode;

/// Maximum length of a single name token or keygroup segment.
pub const MAX_TOKEN_LEN: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("malformed name: {0}")]
    MalformedName(String),
    #[error("record key mismatch: cannot merge records of different identity")]
    KeyMismatch,
    #[error("invalid geo coordinates: lat {lat}, lon {lon}")]
    InvalidGeo { lat: f64, lon: f64 },
    #[error("malformed region: min bound exceeds max bound")]
    MalformedRegion,
    #[error("tombstone records must carry an empty field map")]
    TombstoneWithFields,
}

/// Checks the token rules shared by entity names, keygroup segments and
/// record keys: nonempty, at most [`MAX_TOKEN_LEN`] chars, `[a-zA-Z0-9_-]`.
pub fn validate_token(raw: &str) -> Result<(), ModelError> {
    if raw.is_empty() {
        return Err(ModelError::MalformedName("empty token".into()));
    }
    if raw.len() > MAX_TOKEN_LEN {
        return Err(ModelError::MalformedName(format!(
            "token longer than {MAX_TOKEN_LEN} chars"
        )));
    }
    if let Some(c) = raw
        .chars()
        .find(|c| !c.is_ascii_alphanumeric() && *c != '_' && *c != '-')
    {
        return Err(ModelError::MalformedName(format!(
            "illegal character {c:?} in token {raw:?}"
        )));
    }
    Ok(())
}

/// The kind of a named entity in the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityKind {
    Node,
    Machine,
    Client,
    Keygroup,
}

impl EntityKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EntityKind::Node => "node",
            EntityKind::Machine => "machine",
            EntityKind::Client => "client",
            EntityKind::Keygroup => "keygroup",
        }
    }
}

/// Lifecycle status of a registered identifier. A tombstoned id never
/// returns to active and its name is never reassigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityStatus {
    Active,
    Tombstoned,
}

/// A globally unique identifier: a kind plus a name.
///
/// Node, machine and client names are single dot-free tokens; keygroup ids
/// use the rendered dotted form of their [`KeygroupName`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId {
    kind: EntityKind,
    name: String,
}

impl EntityId {
    pub fn new(kind: EntityKind, name: impl Into<String>) -> Result<Self, ModelError> {
        let name = name.into();
        match kind {
            EntityKind::Keygroup => {
                KeygroupName::parse(&name)?;
            }
            _ => validate_token(&name)?,
        }
        Ok(EntityId { kind, name })
    }

    pub fn node(name: impl Into<String>) -> Result<Self, ModelError> {
        Self::new(EntityKind::Node, name)
    }

    pub fn machine(name: impl Into<String>) -> Result<Self, ModelError> {
        Self::new(EntityKind::Machine, name)
    }

    pub fn client(name: impl Into<String>) -> Result<Self, ModelError> {
        Self::new(EntityKind::Client, name)
    }

    pub fn kind(&self) -> EntityKind {
        self.kind
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.name)
    }
}

/// A dot-separated keygroup name of at least two token segments, e.g.
/// `SmartHomeApp.SomeUser.Temperatures`. The rendered form is globally
/// unique and doubles as the pub/sub topic for the keygroup.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeygroupName {
    segments: Vec<String>,
}

impl KeygroupName {
    pub fn parse(raw: &str) -> Result<Self, ModelError> {
        let segments: Vec<String> = raw.split('.').map(str::to_owned).collect();
        if segments.len() < 2 {
            return Err(ModelError::MalformedName(format!(
                "keygroup name needs at least 2 dot-separated segments, got {:?}",
                raw
            )));
        }
        for seg in &segments {
            validate_token(seg)?;
        }
        Ok(KeygroupName { segments })
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    /// The canonical dotted rendering, also the topic string.
    pub fn rendered(&self) -> String {
        self.segments.join(".")
    }

    pub fn as_entity_id(&self) -> EntityId {
        EntityId {
            kind: EntityKind::Keygroup,
            name: self.rendered(),
        }
    }
}

impl fmt::Display for KeygroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rendered())
    }
}

impl FromStr for KeygroupName {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KeygroupName::parse(s)
    }
}

/// Geographic position in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, ModelError> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon)
        {
            return Err(ModelError::InvalidGeo { lat, lon });
        }
        Ok(GeoPoint { lat, lon })
    }
}

/// Inclusive lat/lon bounding box used for node placement queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self, ModelError> {
        GeoPoint::new(min_lat, min_lon)?;
        GeoPoint::new(max_lat, max_lon)?;
        if min_lat > max_lat || min_lon > max_lon {
            return Err(ModelError::MalformedRegion);
        }
        Ok(BoundingBox {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        })
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        p.lat >= self.min_lat && p.lat <= self.max_lat && p.lon >= self.min_lon && p.lon <= self.max_lon
    }
}

/// A node: a named group of collocated machines sharing one storage system
/// and one geographic site. The unit of replica placement.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDescriptor {
    pub id: EntityId,
    pub location: GeoPoint,
    pub machine_ids: Vec<EntityId>,
    pub public_key: Vec<u8>,
}

/// One daemon endpoint within a node. Machines are interchangeable targets
/// for clients of their node.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineDescriptor {
    pub id: EntityId,
    pub node_id: EntityId,
    pub address: String,
    pub public_key: Vec<u8>,
}

/// An application client identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDescriptor {
    pub id: EntityId,
    pub public_key: Vec<u8>,
}

/// Per-replica retention: how long a replica node buffers records before
/// expiring them locally. `Disabled` means records never expire there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ttl {
    Disabled,
    Millis(u64),
}

impl Ttl {
    pub fn is_disabled(&self) -> bool {
        matches!(self, Ttl::Disabled)
    }

    /// True when a record written at `written_ms` is expired at `now_ms`.
    /// Expiry is strict: age must exceed the TTL.
    pub fn expired(&self, written_ms: u64, now_ms: u64) -> bool {
        match self {
            Ttl::Disabled => false,
            Ttl::Millis(ttl) => now_ms.saturating_sub(written_ms) > *ttl,
        }
    }
}

impl fmt::Display for Ttl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ttl::Disabled => f.write_str("disabled"),
            Ttl::Millis(ms) => write!(f, "{ms}ms"),
        }
    }
}

impl FromStr for Ttl {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("disabled") {
            return Ok(Ttl::Disabled);
        }
        let digits = s.strip_suffix("ms").unwrap_or(s);
        digits
            .parse::<u64>()
            .map(Ttl::Millis)
            .map_err(|_| ModelError::MalformedName(format!("bad ttl {s:?}")))
    }
}

/// Replica-node policy inside keygroup metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaConfig {
    pub ttl: Ttl,
}

/// One version of a keygroup's symmetric secret. Versions start at 1 and
/// increase by one per rotation; the key material is fresh random each time.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretVersion {
    pub version: u64,
    pub key_material: [u8; 16],
}

impl fmt::Debug for SecretVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Key material is intentionally not printed.
        write!(f, "SecretVersion(v{})", self.version)
    }
}

/// The naming-service-authoritative description of one keygroup: members,
/// roles, TTLs, authorized clients and the current secret.
#[derive(Debug, Clone, PartialEq)]
pub struct KeygroupMetadata {
    pub name: KeygroupName,
    pub version: u64,
    pub replica_nodes: BTreeMap<EntityId, ReplicaConfig>,
    pub trigger_nodes: BTreeSet<EntityId>,
    pub authorized_clients: BTreeSet<EntityId>,
    pub secret: SecretVersion,
}

impl KeygroupMetadata {
    /// All member nodes, replica or trigger. The two roles may overlap.
    pub fn member_nodes(&self) -> BTreeSet<EntityId> {
        self.replica_nodes
            .keys()
            .cloned()
            .chain(self.trigger_nodes.iter().cloned())
            .collect()
    }

    pub fn is_replica(&self, node: &EntityId) -> bool {
        self.replica_nodes.contains_key(node)
    }

    pub fn is_trigger(&self, node: &EntityId) -> bool {
        self.trigger_nodes.contains(node)
    }

    pub fn is_member(&self, node: &EntityId) -> bool {
        self.is_replica(node) || self.is_trigger(node)
    }

    pub fn is_authorized_client(&self, client: &EntityId) -> bool {
        self.authorized_clients.contains(client)
    }

    pub fn ttl_for(&self, node: &EntityId) -> Option<Ttl> {
        self.replica_nodes.get(node).map(|c| c.ttl)
    }
}

/// One keyed record: an unordered field map plus update timestamp, writer
/// identity and a tombstone flag. `(keygroup, record_key)` identifies it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataRecord {
    pub keygroup: KeygroupName,
    pub record_key: String,
    pub fields: BTreeMap<String, Vec<u8>>,
    pub update_timestamp: u64,
    pub writer: EntityId,
    pub deleted: bool,
}

impl DataRecord {
    pub fn new(
        keygroup: KeygroupName,
        record_key: impl Into<String>,
        fields: BTreeMap<String, Vec<u8>>,
        update_timestamp: u64,
        writer: EntityId,
    ) -> Result<Self, ModelError> {
        let record_key = record_key.into();
        validate_token(&record_key)?;
        Ok(DataRecord {
            keygroup,
            record_key,
            fields,
            update_timestamp,
            writer,
            deleted: false,
        })
    }

    /// A tombstone marking `(keygroup, record_key)` as deleted. Tombstones
    /// replicate exactly like puts and carry no fields.
    pub fn tombstone(
        keygroup: KeygroupName,
        record_key: impl Into<String>,
        update_timestamp: u64,
        writer: EntityId,
    ) -> Result<Self, ModelError> {
        let record_key = record_key.into();
        validate_token(&record_key)?;
        Ok(DataRecord {
            keygroup,
            record_key,
            fields: BTreeMap::new(),
            update_timestamp,
            writer,
            deleted: true,
        })
    }

    pub fn check_invariants(&self) -> Result<(), ModelError> {
        validate_token(&self.record_key)?;
        if self.deleted && !self.fields.is_empty() {
            return Err(ModelError::TombstoneWithFields);
        }
        Ok(())
    }
}

/// Validates and parses a raw dotted keygroup name.
pub fn validate_keygroup_name(raw: &str) -> Result<KeygroupName, ModelError> {
    KeygroupName::parse(raw)
}

/// Last-writer-wins merge over one record identity.
///
/// The record with the larger `(update_timestamp, writer id)` pair wins.
/// Records equal on both are compared by canonical encoding so the merge
/// stays commutative even for pathological inputs; byte-identical records
/// merge idempotently to `current`.
pub fn merge_record(current: Option<&DataRecord>, incoming: &DataRecord) -> Result<DataRecord, ModelError> {
    incoming.check_invariants()?;
    let current = match current {
        None => return Ok(incoming.clone()),
        Some(c) => c,
    };
    if current.keygroup != incoming.keygroup || current.record_key != incoming.record_key {
        return Err(ModelError::KeyMismatch);
    }
    let cur_key = (current.update_timestamp, current.writer.clone());
    let inc_key = (incoming.update_timestamp, incoming.writer.clone());
    let winner = match inc_key.cmp(&cur_key) {
        std::cmp::Ordering::Greater => incoming,
        std::cmp::Ordering::Less => current,
        std::cmp::Ordering::Equal => {
            // Single-writer keygroups never produce distinct records with
            // equal (timestamp, writer); if misconfiguration does, order by
            // canonical bytes to stay deterministic under any arrival order.
            if incoming.encode() > current.encode() {
                incoming
            } else {
                current
            }
        }
    };
    Ok(winner.clone())
}

/// An encrypted record (or record field map) plus the secret version that
/// sealed it. Decryption with a wrong key or version fails detectably.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedRecord {
    pub secret_version: u64,
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
}

/// A control-plane envelope: payload encrypted to the recipient's public
/// key under an ephemeral key, signed by the sender, with replay-detection
/// fields (random nonce plus a monotone per-sender counter).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedControl {
    pub sender: EntityId,
    pub ephemeral_public: [u8; 32],
    pub nonce: [u8; 12],
    pub counter: u64,
    pub ciphertext: Vec<u8>,
    pub signature: Vec<u8>,
}

/// A counter-stamped, encrypted update published on a keygroup topic.
/// Counters are strictly sequential per `(sender_node, keygroup)` stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateMessage {
    pub sender_node: EntityId,
    pub keygroup: KeygroupName,
    pub counter: u64,
    pub payload: SealedRecord,
    pub secret_version: u64,
}

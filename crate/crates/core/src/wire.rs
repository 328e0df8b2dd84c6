//! Canonical binary encoding.
//!
//! This is the wire format for transport payloads and the file format for
//! journals. Encoding is canonical: struct fields are written in a fixed
//! order, maps and sets iterate in key order, and every composite value
//! starts with a type tag. Top-level messages carry a 1-byte format version
//! so the layout can evolve. Canonical bytes make signatures and hashes
//! stable: equal values encode to equal bytes and `decode(encode(x)) == x`.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::{
    BoundingBox, ClientDescriptor, DataRecord, EntityId, EntityKind, GeoPoint, KeygroupMetadata, KeygroupName,
    MachineDescriptor, NodeDescriptor, ReplicaConfig, SealedControl, SealedRecord, SecretVersion, Ttl,
    UpdateMessage,
};

/// Current top-level format version.
pub const WIRE_FORMAT_V1: u8 = 1;

/// Composite type tags. Every composite writes its tag first so decoding a
/// wrong type fails loudly instead of misinterpreting bytes.
pub mod tag {
    pub const ENTITY_ID: u8 = 0x01;
    pub const KEYGROUP_NAME: u8 = 0x02;
    pub const NODE_DESCRIPTOR: u8 = 0x03;
    pub const MACHINE_DESCRIPTOR: u8 = 0x04;
    pub const CLIENT_DESCRIPTOR: u8 = 0x05;
    pub const REPLICA_CONFIG: u8 = 0x06;
    pub const SECRET_VERSION: u8 = 0x07;
    pub const KEYGROUP_METADATA: u8 = 0x08;
    pub const DATA_RECORD: u8 = 0x09;
    pub const SEALED_RECORD: u8 = 0x0A;
    pub const SEALED_CONTROL: u8 = 0x0B;
    pub const UPDATE_MESSAGE: u8 = 0x0C;
    pub const BOUNDING_BOX: u8 = 0x0D;
    pub const STORED_RECORD: u8 = 0x0E;
    // 0x20.. naming protocol, 0x30.. client protocol, 0x40.. transport
    // frames, 0x50.. journal entries; assigned in their modules.
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("input truncated: needed {needed} more bytes at offset {at}")]
    Truncated { at: usize, needed: usize },
    #[error("unexpected trailing bytes: {0} left over")]
    Trailing(usize),
    #[error("unsupported wire format version {0}")]
    UnsupportedVersion(u8),
    #[error("unexpected type tag: expected {expected:#04x}, got {got:#04x}")]
    UnexpectedTag { expected: u8, got: u8 },
    #[error("invalid value: {0}")]
    Invalid(String),
}

impl DecodeError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DecodeError::Invalid(msg.into())
    }
}

/// Values encodable into the canonical format.
pub trait WireEncode {
    fn encode_into(&self, out: &mut Vec<u8>);

    /// Top-level encoding: format version byte followed by the body.
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.push(WIRE_FORMAT_V1);
        self.encode_into(&mut out);
        out
    }
}

/// Values decodable from the canonical format.
pub trait WireDecode: Sized {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError>;

    /// Top-level decoding: checks the format version and rejects trailing
    /// bytes.
    fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let version = r.get_u8()?;
        if version != WIRE_FORMAT_V1 {
            return Err(DecodeError::UnsupportedVersion(version));
        }
        let value = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(value)
    }
}

/// Cursor over an encoded buffer.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Truncated {
                at: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn get_u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn get_u32(&mut self) -> Result<u32, DecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn get_u64(&mut self) -> Result<u64, DecodeError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }

    pub fn get_f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_bits(self.get_u64()?))
    }

    pub fn get_bool(&mut self) -> Result<bool, DecodeError> {
        match self.get_u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(DecodeError::invalid(format!("bad bool byte {b:#04x}"))),
        }
    }

    pub fn get_bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let len = self.get_u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    pub fn get_array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let b = self.take(N)?;
        let mut out = [0u8; N];
        out.copy_from_slice(b);
        Ok(out)
    }

    pub fn get_str(&mut self) -> Result<String, DecodeError> {
        let bytes = self.get_bytes()?;
        String::from_utf8(bytes).map_err(|_| DecodeError::invalid("string is not valid UTF-8"))
    }

    pub fn expect_tag(&mut self, expected: u8) -> Result<(), DecodeError> {
        let got = self.get_u8()?;
        if got != expected {
            return Err(DecodeError::UnexpectedTag { expected, got });
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<(), DecodeError> {
        if self.remaining() > 0 {
            return Err(DecodeError::Trailing(self.remaining()));
        }
        Ok(())
    }
}

pub fn put_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn put_f64(out: &mut Vec<u8>, v: f64) {
    put_u64(out, v.to_bits());
}

pub fn put_bool(out: &mut Vec<u8>, v: bool) {
    out.push(v as u8);
}

pub fn put_bytes(out: &mut Vec<u8>, v: &[u8]) {
    put_u32(out, v.len() as u32);
    out.extend_from_slice(v);
}

pub fn put_str(out: &mut Vec<u8>, v: &str) {
    put_bytes(out, v.as_bytes());
}

pub fn put_list<T: WireEncode>(out: &mut Vec<u8>, items: &[T]) {
    put_u32(out, items.len() as u32);
    for item in items {
        item.encode_into(out);
    }
}

pub fn get_list<T: WireDecode>(r: &mut Reader<'_>) -> Result<Vec<T>, DecodeError> {
    let n = r.get_u32()? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        out.push(T::decode_from(r)?);
    }
    Ok(out)
}

pub fn put_option<T: WireEncode>(out: &mut Vec<u8>, v: &Option<T>) {
    match v {
        None => put_u8(out, 0),
        Some(inner) => {
            put_u8(out, 1);
            inner.encode_into(out);
        }
    }
}

pub fn get_option<T: WireDecode>(r: &mut Reader<'_>) -> Result<Option<T>, DecodeError> {
    match r.get_u8()? {
        0 => Ok(None),
        1 => Ok(Some(T::decode_from(r)?)),
        b => Err(DecodeError::invalid(format!("bad option byte {b:#04x}"))),
    }
}

impl WireEncode for EntityKind {
    fn encode_into(&self, out: &mut Vec<u8>) {
        let b = match self {
            EntityKind::Node => 0,
            EntityKind::Machine => 1,
            EntityKind::Client => 2,
            EntityKind::Keygroup => 3,
        };
        put_u8(out, b);
    }
}

impl WireDecode for EntityKind {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.get_u8()? {
            0 => Ok(EntityKind::Node),
            1 => Ok(EntityKind::Machine),
            2 => Ok(EntityKind::Client),
            3 => Ok(EntityKind::Keygroup),
            b => Err(DecodeError::invalid(format!("bad entity kind {b:#04x}"))),
        }
    }
}

impl WireEncode for EntityId {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, tag::ENTITY_ID);
        self.kind().encode_into(out);
        put_str(out, self.name());
    }
}

impl WireDecode for EntityId {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(tag::ENTITY_ID)?;
        let kind = EntityKind::decode_from(r)?;
        let name = r.get_str()?;
        EntityId::new(kind, name).map_err(|e| DecodeError::invalid(e.to_string()))
    }
}

impl WireEncode for KeygroupName {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, tag::KEYGROUP_NAME);
        put_str(out, &self.rendered());
    }
}

impl WireDecode for KeygroupName {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(tag::KEYGROUP_NAME)?;
        let rendered = r.get_str()?;
        KeygroupName::parse(&rendered).map_err(|e| DecodeError::invalid(e.to_string()))
    }
}

impl WireEncode for GeoPoint {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_f64(out, self.lat);
        put_f64(out, self.lon);
    }
}

impl WireDecode for GeoPoint {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let lat = r.get_f64()?;
        let lon = r.get_f64()?;
        GeoPoint::new(lat, lon).map_err(|e| DecodeError::invalid(e.to_string()))
    }
}

impl WireEncode for BoundingBox {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, tag::BOUNDING_BOX);
        put_f64(out, self.min_lat);
        put_f64(out, self.min_lon);
        put_f64(out, self.max_lat);
        put_f64(out, self.max_lon);
    }
}

impl WireDecode for BoundingBox {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(tag::BOUNDING_BOX)?;
        let min_lat = r.get_f64()?;
        let min_lon = r.get_f64()?;
        let max_lat = r.get_f64()?;
        let max_lon = r.get_f64()?;
        BoundingBox::new(min_lat, min_lon, max_lat, max_lon).map_err(|e| DecodeError::invalid(e.to_string()))
    }
}

impl WireEncode for NodeDescriptor {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, tag::NODE_DESCRIPTOR);
        self.id.encode_into(out);
        self.location.encode_into(out);
        put_list(out, &self.machine_ids);
        put_bytes(out, &self.public_key);
    }
}

impl WireDecode for NodeDescriptor {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(tag::NODE_DESCRIPTOR)?;
        Ok(NodeDescriptor {
            id: EntityId::decode_from(r)?,
            location: GeoPoint::decode_from(r)?,
            machine_ids: get_list(r)?,
            public_key: r.get_bytes()?,
        })
    }
}

impl WireEncode for MachineDescriptor {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, tag::MACHINE_DESCRIPTOR);
        self.id.encode_into(out);
        self.node_id.encode_into(out);
        put_str(out, &self.address);
        put_bytes(out, &self.public_key);
    }
}

impl WireDecode for MachineDescriptor {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(tag::MACHINE_DESCRIPTOR)?;
        Ok(MachineDescriptor {
            id: EntityId::decode_from(r)?,
            node_id: EntityId::decode_from(r)?,
            address: r.get_str()?,
            public_key: r.get_bytes()?,
        })
    }
}

impl WireEncode for ClientDescriptor {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, tag::CLIENT_DESCRIPTOR);
        self.id.encode_into(out);
        put_bytes(out, &self.public_key);
    }
}

impl WireDecode for ClientDescriptor {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(tag::CLIENT_DESCRIPTOR)?;
        Ok(ClientDescriptor {
            id: EntityId::decode_from(r)?,
            public_key: r.get_bytes()?,
        })
    }
}

impl WireEncode for Ttl {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Ttl::Disabled => put_u8(out, 0),
            Ttl::Millis(ms) => {
                put_u8(out, 1);
                put_u64(out, *ms);
            }
        }
    }
}

impl WireDecode for Ttl {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.get_u8()? {
            0 => Ok(Ttl::Disabled),
            1 => Ok(Ttl::Millis(r.get_u64()?)),
            b => Err(DecodeError::invalid(format!("bad ttl variant {b:#04x}"))),
        }
    }
}

impl WireEncode for ReplicaConfig {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, tag::REPLICA_CONFIG);
        self.ttl.encode_into(out);
    }
}

impl WireDecode for ReplicaConfig {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(tag::REPLICA_CONFIG)?;
        Ok(ReplicaConfig {
            ttl: Ttl::decode_from(r)?,
        })
    }
}

impl WireEncode for SecretVersion {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, tag::SECRET_VERSION);
        put_u64(out, self.version);
        out.extend_from_slice(&self.key_material);
    }
}

impl WireDecode for SecretVersion {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(tag::SECRET_VERSION)?;
        let version = r.get_u64()?;
        if version == 0 {
            return Err(DecodeError::invalid("secret version must be >= 1"));
        }
        Ok(SecretVersion {
            version,
            key_material: r.get_array::<16>()?,
        })
    }
}

impl WireEncode for KeygroupMetadata {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, tag::KEYGROUP_METADATA);
        self.name.encode_into(out);
        put_u64(out, self.version);
        put_u32(out, self.replica_nodes.len() as u32);
        for (node, cfg) in &self.replica_nodes {
            node.encode_into(out);
            cfg.encode_into(out);
        }
        put_u32(out, self.trigger_nodes.len() as u32);
        for node in &self.trigger_nodes {
            node.encode_into(out);
        }
        put_u32(out, self.authorized_clients.len() as u32);
        for client in &self.authorized_clients {
            client.encode_into(out);
        }
        self.secret.encode_into(out);
    }
}

impl WireDecode for KeygroupMetadata {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(tag::KEYGROUP_METADATA)?;
        let name = KeygroupName::decode_from(r)?;
        let version = r.get_u64()?;
        let n = r.get_u32()? as usize;
        let mut replica_nodes = BTreeMap::new();
        for _ in 0..n {
            let node = EntityId::decode_from(r)?;
            let cfg = ReplicaConfig::decode_from(r)?;
            replica_nodes.insert(node, cfg);
        }
        let n = r.get_u32()? as usize;
        let mut trigger_nodes = BTreeSet::new();
        for _ in 0..n {
            trigger_nodes.insert(EntityId::decode_from(r)?);
        }
        let n = r.get_u32()? as usize;
        let mut authorized_clients = BTreeSet::new();
        for _ in 0..n {
            authorized_clients.insert(EntityId::decode_from(r)?);
        }
        let secret = SecretVersion::decode_from(r)?;
        Ok(KeygroupMetadata {
            name,
            version,
            replica_nodes,
            trigger_nodes,
            authorized_clients,
            secret,
        })
    }
}

impl WireEncode for DataRecord {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, tag::DATA_RECORD);
        self.keygroup.encode_into(out);
        put_str(out, &self.record_key);
        put_u32(out, self.fields.len() as u32);
        for (name, value) in &self.fields {
            put_str(out, name);
            put_bytes(out, value);
        }
        put_u64(out, self.update_timestamp);
        self.writer.encode_into(out);
        put_bool(out, self.deleted);
    }
}

impl WireDecode for DataRecord {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(tag::DATA_RECORD)?;
        let keygroup = KeygroupName::decode_from(r)?;
        let record_key = r.get_str()?;
        let n = r.get_u32()? as usize;
        let mut fields = BTreeMap::new();
        for _ in 0..n {
            let name = r.get_str()?;
            let value = r.get_bytes()?;
            if fields.insert(name, value).is_some() {
                return Err(DecodeError::invalid("duplicate field name"));
            }
        }
        let update_timestamp = r.get_u64()?;
        let writer = EntityId::decode_from(r)?;
        let deleted = r.get_bool()?;
        let record = DataRecord {
            keygroup,
            record_key,
            fields,
            update_timestamp,
            writer,
            deleted,
        };
        record
            .check_invariants()
            .map_err(|e| DecodeError::invalid(e.to_string()))?;
        Ok(record)
    }
}

impl WireEncode for SealedRecord {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, tag::SEALED_RECORD);
        put_u64(out, self.secret_version);
        out.extend_from_slice(&self.nonce);
        put_bytes(out, &self.ciphertext);
    }
}

impl WireDecode for SealedRecord {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(tag::SEALED_RECORD)?;
        Ok(SealedRecord {
            secret_version: r.get_u64()?,
            nonce: r.get_array::<12>()?,
            ciphertext: r.get_bytes()?,
        })
    }
}

impl WireEncode for SealedControl {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, tag::SEALED_CONTROL);
        self.sender.encode_into(out);
        out.extend_from_slice(&self.ephemeral_public);
        out.extend_from_slice(&self.nonce);
        put_u64(out, self.counter);
        put_bytes(out, &self.ciphertext);
        put_bytes(out, &self.signature);
    }
}

impl WireDecode for SealedControl {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(tag::SEALED_CONTROL)?;
        Ok(SealedControl {
            sender: EntityId::decode_from(r)?,
            ephemeral_public: r.get_array::<32>()?,
            nonce: r.get_array::<12>()?,
            counter: r.get_u64()?,
            ciphertext: r.get_bytes()?,
            signature: r.get_bytes()?,
        })
    }
}

impl WireEncode for UpdateMessage {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, tag::UPDATE_MESSAGE);
        self.sender_node.encode_into(out);
        self.keygroup.encode_into(out);
        put_u64(out, self.counter);
        self.payload.encode_into(out);
        put_u64(out, self.secret_version);
    }
}

impl WireDecode for UpdateMessage {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(tag::UPDATE_MESSAGE)?;
        Ok(UpdateMessage {
            sender_node: EntityId::decode_from(r)?,
            keygroup: KeygroupName::decode_from(r)?,
            counter: r.get_u64()?,
            payload: SealedRecord::decode_from(r)?,
            secret_version: r.get_u64()?,
        })
    }
}

impl WireEncode for String {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_str(out, self);
    }
}

impl WireDecode for String {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.get_str()
    }
}

impl WireEncode for u64 {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, *self);
    }
}

impl WireDecode for u64 {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.get_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EntityId;

    fn sample_record() -> DataRecord {
        let mut fields = BTreeMap::new();
        fields.insert("temp".to_string(), b"21.5".to_vec());
        fields.insert("unit".to_string(), b"C".to_vec());
        fields.insert("zz".to_string(), vec![0, 1, 2, 255]);
        DataRecord::new(
            KeygroupName::parse("app.user.temps").unwrap(),
            "t17",
            fields,
            1234,
            EntityId::node("edge1").unwrap(),
        )
        .unwrap()
    }

    fn sample_metadata() -> KeygroupMetadata {
        let mut replica_nodes = BTreeMap::new();
        replica_nodes.insert(EntityId::node("edge1").unwrap(), ReplicaConfig { ttl: Ttl::Millis(600_000) });
        replica_nodes.insert(EntityId::node("cloud").unwrap(), ReplicaConfig { ttl: Ttl::Disabled });
        let mut trigger_nodes = BTreeSet::new();
        // Overlapping role: cloud is both replica and trigger.
        trigger_nodes.insert(EntityId::node("cloud").unwrap());
        let mut authorized_clients = BTreeSet::new();
        authorized_clients.insert(EntityId::client("sensor").unwrap());
        KeygroupMetadata {
            name: KeygroupName::parse("app.user.temps").unwrap(),
            version: 3,
            replica_nodes,
            trigger_nodes,
            authorized_clients,
            secret: SecretVersion {
                version: 2,
                key_material: [7u8; 16],
            },
        }
    }

    #[test]
    fn record_round_trip() {
        let rec = sample_record();
        let bytes = rec.encode();
        assert_eq!(bytes[0], WIRE_FORMAT_V1);
        assert_eq!(DataRecord::decode(&bytes).unwrap(), rec);
    }

    #[test]
    fn metadata_round_trip_with_overlapping_roles() {
        let meta = sample_metadata();
        let decoded = KeygroupMetadata::decode(&meta.encode()).unwrap();
        assert_eq!(decoded, meta);
        assert!(decoded.is_replica(&EntityId::node("cloud").unwrap()));
        assert!(decoded.is_trigger(&EntityId::node("cloud").unwrap()));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample_record().encode();
        for cut in [1, bytes.len() / 2, bytes.len() - 1] {
            let err = DataRecord::decode(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, DecodeError::Truncated { .. } | DecodeError::Invalid(_)),
                "cut at {cut} gave {err:?}"
            );
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = sample_record().encode();
        bytes.push(0);
        assert_eq!(DataRecord::decode(&bytes), Err(DecodeError::Trailing(1)));
    }

    #[test]
    fn wrong_tag_is_rejected() {
        let bytes = sample_metadata().encode();
        let err = DataRecord::decode(&bytes).unwrap_err();
        assert!(matches!(err, DecodeError::UnexpectedTag { .. }));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = sample_record().encode();
        bytes[0] = 9;
        assert_eq!(DataRecord::decode(&bytes), Err(DecodeError::UnsupportedVersion(9)));
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(sample_metadata().encode(), sample_metadata().encode());
        assert_eq!(sample_record().encode(), sample_record().encode());
    }

    #[test]
    fn update_message_round_trip() {
        let msg = UpdateMessage {
            sender_node: EntityId::node("edge1").unwrap(),
            keygroup: KeygroupName::parse("app.user.temps").unwrap(),
            counter: 42,
            payload: SealedRecord {
                secret_version: 2,
                nonce: [1u8; 12],
                ciphertext: vec![9, 9, 9],
            },
            secret_version: 2,
        };
        assert_eq!(UpdateMessage::decode(&msg.encode()).unwrap(), msg);
    }
}

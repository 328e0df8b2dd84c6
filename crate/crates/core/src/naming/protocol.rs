//! Wire protocol of the naming service: request/response types carried
//! over the transport's direct channel inside sealed control envelopes.
//!
//! A request is the canonical encoding of (operation, arguments,
//! authentication context); responses carry a status code plus payload.
//! Requests reserve a shard-key field for a sharded deployment.

use std::fmt;

use crate::model::{
    ClientDescriptor, EntityId, KeygroupMetadata, KeygroupName, MachineDescriptor, NodeDescriptor, Ttl,
};
use crate::wire::{self, DecodeError, Reader, WireDecode, WireEncode};

const AUTH_CONTEXT_TAG: u8 = 0x21;
const NAMING_OP_TAG: u8 = 0x22;
const KEYGROUP_CHANGE_TAG: u8 = 0x23;
const DESCRIPTOR_TAG: u8 = 0x24;
const NAMING_REQUEST_TAG: u8 = 0x25;
const NAMING_REPLY_TAG: u8 = 0x26;
const NAMING_OUTCOME_TAG: u8 = 0x27;
const ACCEPTED_MUTATION_TAG: u8 = 0x28;
const REGION_TAG: u8 = 0x29;

/// Domain prefix for authentication proofs so they cannot be confused
/// with other signatures.
pub const AUTH_PROOF_CONTEXT: &[u8] = b"fog/naming-auth/v1";

/// Who is asking, with a signature over the operation by the caller's
/// registered key. Requests with an invalid proof are rejected before any
/// state change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthContext {
    pub caller: EntityId,
    pub proof: Vec<u8>,
}

impl AuthContext {
    /// The exact bytes the proof signs: a domain prefix plus the encoded
    /// operation.
    pub fn signing_bytes(op: &NamingOp) -> Vec<u8> {
        let mut out = AUTH_PROOF_CONTEXT.to_vec();
        out.extend_from_slice(&op.encode());
        out
    }
}

/// A registered descriptor of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum EntityDescriptor {
    Node(NodeDescriptor),
    Machine(MachineDescriptor),
    Client(ClientDescriptor),
}

impl EntityDescriptor {
    pub fn id(&self) -> &EntityId {
        match self {
            EntityDescriptor::Node(d) => &d.id,
            EntityDescriptor::Machine(d) => &d.id,
            EntityDescriptor::Client(d) => &d.id,
        }
    }

    pub fn public_key(&self) -> &[u8] {
        match self {
            EntityDescriptor::Node(d) => &d.public_key,
            EntityDescriptor::Machine(d) => &d.public_key,
            EntityDescriptor::Client(d) => &d.public_key,
        }
    }
}

/// A keygroup metadata mutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeygroupChange {
    AddReplica { node: EntityId, ttl: Ttl },
    RemoveReplica { node: EntityId },
    AddTrigger { node: EntityId },
    RemoveTrigger { node: EntityId },
    SetTtl { node: EntityId, ttl: Ttl },
    AddClient { client: EntityId },
    RemoveClient { client: EntityId },
}

impl KeygroupChange {
    /// The node the caller would be adding, when this change adds one.
    pub fn added_node(&self) -> Option<&EntityId> {
        match self {
            KeygroupChange::AddReplica { node, .. } | KeygroupChange::AddTrigger { node } => Some(node),
            _ => None,
        }
    }

    /// True when this change removes a node from the keygroup's node set
    /// (and therefore rotates the secret).
    pub fn removes_node(&self) -> bool {
        matches!(
            self,
            KeygroupChange::RemoveReplica { .. } | KeygroupChange::RemoveTrigger { .. }
        )
    }
}

/// A lat/lon query region as received; validated inside the service so a
/// malformed region is a domain error, not a decode error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

/// What a configuration read targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigTarget {
    Entity(EntityId),
    Keygroup(KeygroupName),
}

#[derive(Debug, Clone, PartialEq)]
pub enum NamingOp {
    Bootstrap {
        node: NodeDescriptor,
        client: ClientDescriptor,
    },
    Register {
        descriptor: EntityDescriptor,
    },
    Tombstone {
        id: EntityId,
    },
    CreateKeygroup {
        name: KeygroupName,
        initial_replica: EntityId,
        initial_ttl: Ttl,
    },
    UpdateKeygroup {
        name: KeygroupName,
        change: KeygroupChange,
    },
    GetConfig {
        target: ConfigTarget,
        cached_version: Option<u64>,
    },
    QueryNodesByRegion {
        region: Region,
    },
}

impl NamingOp {
    pub fn is_mutation(&self) -> bool {
        !matches!(self, NamingOp::GetConfig { .. } | NamingOp::QueryNodesByRegion { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamingRequest {
    pub op: NamingOp,
    pub auth: AuthContext,
    /// Reserved for a sharded deployment; unused by the single-shard
    /// service.
    pub shard_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NamingReply {
    Done,
    Registered(EntityId),
    Metadata(KeygroupMetadata),
    Entity { descriptor: EntityDescriptor, version: u64 },
    UpToDate,
    Nodes(Vec<NodeDescriptor>),
}

/// Naming service errors, carried on the wire as stable status codes.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NamingError {
    #[error("store is already bootstrapped")]
    AlreadyBootstrapped,
    #[error("caller could not be authenticated")]
    Unauthenticated,
    #[error("name already taken (names are never reassigned)")]
    NameTaken,
    #[error("parent node is unknown")]
    UnknownParentNode,
    #[error("no such id")]
    NotFound,
    #[error("id is still referenced by a keygroup")]
    StillReferenced,
    #[error("node is unknown, tombstoned, or has no machines")]
    UnknownNode,
    #[error("keygroup is unknown")]
    UnknownKeygroup,
    #[error("caller is not permitted to perform this operation")]
    Forbidden,
    #[error("removal would leave the keygroup with no replica node")]
    LastReplica,
    #[error("malformed region: min bound exceeds max bound")]
    MalformedRegion,
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("naming service unreachable")]
    Unreachable,
}

impl NamingError {
    fn code(&self) -> u8 {
        match self {
            NamingError::AlreadyBootstrapped => 1,
            NamingError::Unauthenticated => 2,
            NamingError::NameTaken => 3,
            NamingError::UnknownParentNode => 4,
            NamingError::NotFound => 5,
            NamingError::StillReferenced => 6,
            NamingError::UnknownNode => 7,
            NamingError::UnknownKeygroup => 8,
            NamingError::Forbidden => 9,
            NamingError::LastReplica => 10,
            NamingError::MalformedRegion => 11,
            NamingError::BadRequest(_) => 12,
            NamingError::Unreachable => 13,
        }
    }

    fn from_code(code: u8, message: String) -> Result<Self, DecodeError> {
        Ok(match code {
            1 => NamingError::AlreadyBootstrapped,
            2 => NamingError::Unauthenticated,
            3 => NamingError::NameTaken,
            4 => NamingError::UnknownParentNode,
            5 => NamingError::NotFound,
            6 => NamingError::StillReferenced,
            7 => NamingError::UnknownNode,
            8 => NamingError::UnknownKeygroup,
            9 => NamingError::Forbidden,
            10 => NamingError::LastReplica,
            11 => NamingError::MalformedRegion,
            12 => NamingError::BadRequest(message),
            13 => NamingError::Unreachable,
            b => return Err(DecodeError::invalid(format!("bad naming error code {b}"))),
        })
    }
}

/// One accepted mutation, as journaled and replayed. Randomness resolved
/// by the mutation (a created or rotated secret) is recorded so a replay
/// reproduces the exact store state.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedMutation {
    pub log_version: u64,
    pub caller: EntityId,
    pub op: NamingOp,
    pub secret: Option<crate::model::SecretVersion>,
}

impl WireEncode for AuthContext {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, AUTH_CONTEXT_TAG);
        self.caller.encode_into(out);
        wire::put_bytes(out, &self.proof);
    }
}

impl WireDecode for AuthContext {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(AUTH_CONTEXT_TAG)?;
        Ok(AuthContext {
            caller: EntityId::decode_from(r)?,
            proof: r.get_bytes()?,
        })
    }
}

impl WireEncode for EntityDescriptor {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, DESCRIPTOR_TAG);
        match self {
            EntityDescriptor::Node(d) => {
                wire::put_u8(out, 0);
                d.encode_into(out);
            }
            EntityDescriptor::Machine(d) => {
                wire::put_u8(out, 1);
                d.encode_into(out);
            }
            EntityDescriptor::Client(d) => {
                wire::put_u8(out, 2);
                d.encode_into(out);
            }
        }
    }
}

impl WireDecode for EntityDescriptor {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(DESCRIPTOR_TAG)?;
        match r.get_u8()? {
            0 => Ok(EntityDescriptor::Node(NodeDescriptor::decode_from(r)?)),
            1 => Ok(EntityDescriptor::Machine(MachineDescriptor::decode_from(r)?)),
            2 => Ok(EntityDescriptor::Client(ClientDescriptor::decode_from(r)?)),
            b => Err(DecodeError::invalid(format!("bad descriptor kind {b:#04x}"))),
        }
    }
}

impl WireEncode for KeygroupChange {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, KEYGROUP_CHANGE_TAG);
        match self {
            KeygroupChange::AddReplica { node, ttl } => {
                wire::put_u8(out, 0);
                node.encode_into(out);
                ttl.encode_into(out);
            }
            KeygroupChange::RemoveReplica { node } => {
                wire::put_u8(out, 1);
                node.encode_into(out);
            }
            KeygroupChange::AddTrigger { node } => {
                wire::put_u8(out, 2);
                node.encode_into(out);
            }
            KeygroupChange::RemoveTrigger { node } => {
                wire::put_u8(out, 3);
                node.encode_into(out);
            }
            KeygroupChange::SetTtl { node, ttl } => {
                wire::put_u8(out, 4);
                node.encode_into(out);
                ttl.encode_into(out);
            }
            KeygroupChange::AddClient { client } => {
                wire::put_u8(out, 5);
                client.encode_into(out);
            }
            KeygroupChange::RemoveClient { client } => {
                wire::put_u8(out, 6);
                client.encode_into(out);
            }
        }
    }
}

impl WireDecode for KeygroupChange {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(KEYGROUP_CHANGE_TAG)?;
        match r.get_u8()? {
            0 => Ok(KeygroupChange::AddReplica {
                node: EntityId::decode_from(r)?,
                ttl: Ttl::decode_from(r)?,
            }),
            1 => Ok(KeygroupChange::RemoveReplica {
                node: EntityId::decode_from(r)?,
            }),
            2 => Ok(KeygroupChange::AddTrigger {
                node: EntityId::decode_from(r)?,
            }),
            3 => Ok(KeygroupChange::RemoveTrigger {
                node: EntityId::decode_from(r)?,
            }),
            4 => Ok(KeygroupChange::SetTtl {
                node: EntityId::decode_from(r)?,
                ttl: Ttl::decode_from(r)?,
            }),
            5 => Ok(KeygroupChange::AddClient {
                client: EntityId::decode_from(r)?,
            }),
            6 => Ok(KeygroupChange::RemoveClient {
                client: EntityId::decode_from(r)?,
            }),
            b => Err(DecodeError::invalid(format!("bad keygroup change {b:#04x}"))),
        }
    }
}

impl WireEncode for Region {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, REGION_TAG);
        wire::put_f64(out, self.min_lat);
        wire::put_f64(out, self.min_lon);
        wire::put_f64(out, self.max_lat);
        wire::put_f64(out, self.max_lon);
    }
}

impl WireDecode for Region {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(REGION_TAG)?;
        Ok(Region {
            min_lat: r.get_f64()?,
            min_lon: r.get_f64()?,
            max_lat: r.get_f64()?,
            max_lon: r.get_f64()?,
        })
    }
}

impl WireEncode for NamingOp {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, NAMING_OP_TAG);
        match self {
            NamingOp::Bootstrap { node, client } => {
                wire::put_u8(out, 0);
                node.encode_into(out);
                client.encode_into(out);
            }
            NamingOp::Register { descriptor } => {
                wire::put_u8(out, 1);
                descriptor.encode_into(out);
            }
            NamingOp::Tombstone { id } => {
                wire::put_u8(out, 2);
                id.encode_into(out);
            }
            NamingOp::CreateKeygroup {
                name,
                initial_replica,
                initial_ttl,
            } => {
                wire::put_u8(out, 3);
                name.encode_into(out);
                initial_replica.encode_into(out);
                initial_ttl.encode_into(out);
            }
            NamingOp::UpdateKeygroup { name, change } => {
                wire::put_u8(out, 4);
                name.encode_into(out);
                change.encode_into(out);
            }
            NamingOp::GetConfig { target, cached_version } => {
                wire::put_u8(out, 5);
                match target {
                    ConfigTarget::Entity(id) => {
                        wire::put_u8(out, 0);
                        id.encode_into(out);
                    }
                    ConfigTarget::Keygroup(name) => {
                        wire::put_u8(out, 1);
                        name.encode_into(out);
                    }
                }
                wire::put_option(out, cached_version);
            }
            NamingOp::QueryNodesByRegion { region } => {
                wire::put_u8(out, 6);
                region.encode_into(out);
            }
        }
    }
}

impl WireDecode for NamingOp {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(NAMING_OP_TAG)?;
        match r.get_u8()? {
            0 => Ok(NamingOp::Bootstrap {
                node: NodeDescriptor::decode_from(r)?,
                client: ClientDescriptor::decode_from(r)?,
            }),
            1 => Ok(NamingOp::Register {
                descriptor: EntityDescriptor::decode_from(r)?,
            }),
            2 => Ok(NamingOp::Tombstone {
                id: EntityId::decode_from(r)?,
            }),
            3 => Ok(NamingOp::CreateKeygroup {
                name: KeygroupName::decode_from(r)?,
                initial_replica: EntityId::decode_from(r)?,
                initial_ttl: Ttl::decode_from(r)?,
            }),
            4 => Ok(NamingOp::UpdateKeygroup {
                name: KeygroupName::decode_from(r)?,
                change: KeygroupChange::decode_from(r)?,
            }),
            5 => {
                let target = match r.get_u8()? {
                    0 => ConfigTarget::Entity(EntityId::decode_from(r)?),
                    1 => ConfigTarget::Keygroup(KeygroupName::decode_from(r)?),
                    b => return Err(DecodeError::invalid(format!("bad config target {b:#04x}"))),
                };
                Ok(NamingOp::GetConfig {
                    target,
                    cached_version: wire::get_option(r)?,
                })
            }
            6 => Ok(NamingOp::QueryNodesByRegion {
                region: Region::decode_from(r)?,
            }),
            b => Err(DecodeError::invalid(format!("bad naming op {b:#04x}"))),
        }
    }
}

impl WireEncode for NamingRequest {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, NAMING_REQUEST_TAG);
        self.op.encode_into(out);
        self.auth.encode_into(out);
        wire::put_option(out, &self.shard_key);
    }
}

impl WireDecode for NamingRequest {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(NAMING_REQUEST_TAG)?;
        Ok(NamingRequest {
            op: NamingOp::decode_from(r)?,
            auth: AuthContext::decode_from(r)?,
            shard_key: wire::get_option(r)?,
        })
    }
}

impl WireEncode for NamingReply {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, NAMING_REPLY_TAG);
        match self {
            NamingReply::Done => wire::put_u8(out, 0),
            NamingReply::Registered(id) => {
                wire::put_u8(out, 1);
                id.encode_into(out);
            }
            NamingReply::Metadata(meta) => {
                wire::put_u8(out, 2);
                meta.encode_into(out);
            }
            NamingReply::Entity { descriptor, version } => {
                wire::put_u8(out, 3);
                descriptor.encode_into(out);
                wire::put_u64(out, *version);
            }
            NamingReply::UpToDate => wire::put_u8(out, 4),
            NamingReply::Nodes(nodes) => {
                wire::put_u8(out, 5);
                wire::put_list(out, nodes);
            }
        }
    }
}

impl WireDecode for NamingReply {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(NAMING_REPLY_TAG)?;
        match r.get_u8()? {
            0 => Ok(NamingReply::Done),
            1 => Ok(NamingReply::Registered(EntityId::decode_from(r)?)),
            2 => Ok(NamingReply::Metadata(KeygroupMetadata::decode_from(r)?)),
            3 => Ok(NamingReply::Entity {
                descriptor: EntityDescriptor::decode_from(r)?,
                version: r.get_u64()?,
            }),
            4 => Ok(NamingReply::UpToDate),
            5 => Ok(NamingReply::Nodes(wire::get_list(r)?)),
            b => Err(DecodeError::invalid(format!("bad naming reply {b:#04x}"))),
        }
    }
}

/// The response envelope: either a reply or a stable error code.
#[derive(Debug, Clone, PartialEq)]
pub struct NamingOutcome(pub Result<NamingReply, NamingError>);

impl WireEncode for NamingOutcome {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, NAMING_OUTCOME_TAG);
        match &self.0 {
            Ok(reply) => {
                wire::put_u8(out, 0);
                reply.encode_into(out);
            }
            Err(err) => {
                wire::put_u8(out, err.code());
                let message = match err {
                    NamingError::BadRequest(m) => m.clone(),
                    other => other.to_string(),
                };
                wire::put_str(out, &message);
            }
        }
    }
}

impl WireDecode for NamingOutcome {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(NAMING_OUTCOME_TAG)?;
        match r.get_u8()? {
            0 => Ok(NamingOutcome(Ok(NamingReply::decode_from(r)?))),
            code => {
                let message = r.get_str()?;
                Ok(NamingOutcome(Err(NamingError::from_code(code, message)?)))
            }
        }
    }
}

impl WireEncode for AcceptedMutation {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, ACCEPTED_MUTATION_TAG);
        wire::put_u64(out, self.log_version);
        self.caller.encode_into(out);
        self.op.encode_into(out);
        wire::put_option(out, &self.secret);
    }
}

impl WireDecode for AcceptedMutation {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(ACCEPTED_MUTATION_TAG)?;
        Ok(AcceptedMutation {
            log_version: r.get_u64()?,
            caller: EntityId::decode_from(r)?,
            op: NamingOp::decode_from(r)?,
            secret: wire::get_option(r)?,
        })
    }
}

impl fmt::Display for NamingOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            NamingOp::Bootstrap { .. } => "bootstrap",
            NamingOp::Register { .. } => "register",
            NamingOp::Tombstone { .. } => "tombstone",
            NamingOp::CreateKeygroup { .. } => "create-keygroup",
            NamingOp::UpdateKeygroup { .. } => "update-keygroup",
            NamingOp::GetConfig { .. } => "get-config",
            NamingOp::QueryNodesByRegion { .. } => "query-nodes",
        };
        f.write_str(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GeoPoint;

    #[test]
    fn request_round_trip() {
        let op = NamingOp::CreateKeygroup {
            name: KeygroupName::parse("a.b").unwrap(),
            initial_replica: EntityId::node("n1").unwrap(),
            initial_ttl: Ttl::Disabled,
        };
        let req = NamingRequest {
            op,
            auth: AuthContext {
                caller: EntityId::client("c1").unwrap(),
                proof: vec![1, 2, 3],
            },
            shard_key: Some("a.b".into()),
        };
        assert_eq!(NamingRequest::decode(&req.encode()).unwrap(), req);
    }

    #[test]
    fn outcome_round_trip_ok_and_err() {
        let ok = NamingOutcome(Ok(NamingReply::Registered(EntityId::node("n").unwrap())));
        assert_eq!(NamingOutcome::decode(&ok.encode()).unwrap(), ok);
        let err = NamingOutcome(Err(NamingError::Forbidden));
        assert_eq!(NamingOutcome::decode(&err.encode()).unwrap(), err);
        let bad = NamingOutcome(Err(NamingError::BadRequest("nope".into())));
        assert_eq!(NamingOutcome::decode(&bad.encode()).unwrap(), bad);
    }

    #[test]
    fn descriptor_round_trip() {
        let node = EntityDescriptor::Node(NodeDescriptor {
            id: EntityId::node("n1").unwrap(),
            location: GeoPoint::new(52.52, 13.4).unwrap(),
            machine_ids: vec![EntityId::machine("m1").unwrap()],
            public_key: vec![0u8; 64],
        });
        assert_eq!(EntityDescriptor::decode(&node.encode()).unwrap(), node);
    }
}

//! Daemon-facing request/response protocol.
//!
//! Two message families share the daemon's direct channel:
//!
//! - [`ClientRequest`]: the client API (put/get/delete, trigger streams,
//!   and an opaque relay for naming requests). Record payloads travel
//!   sealed under the keygroup secret in both directions; naming relays
//!   are end-to-end envelopes the daemon cannot read. The schema is
//!   identical whether the daemon is reached in-process or over sockets.
//! - [`PeerRequest`]: node-to-node recovery traffic (missed-counter
//!   recovery, counter probes, replica state pulls).

use crate::model::{EntityId, KeygroupName, SealedRecord};
use crate::naming::protocol::AuthContext;
use crate::wire::{self, DecodeError, Reader, WireDecode, WireEncode};

pub const CLIENT_REQUEST_TAG: u8 = 0x30;
const CLIENT_OP_TAG: u8 = 0x31;
const CLIENT_OUTCOME_TAG: u8 = 0x32;
const CLIENT_REPLY_TAG: u8 = 0x33;
pub const PEER_REQUEST_TAG: u8 = 0x38;
const PEER_REPLY_TAG: u8 = 0x39;
const RECOVERY_ITEM_TAG: u8 = 0x3A;

/// Domain prefix for client authentication proofs.
pub const CLIENT_PROOF_CONTEXT: &[u8] = b"fog/client-auth/v1";

#[derive(Debug, Clone, PartialEq)]
pub enum ClientOp {
    /// Write a record: the field map travels sealed under the keygroup
    /// secret; the daemon stamps timestamp and writer.
    Put {
        keygroup: KeygroupName,
        record_key: String,
        fields: SealedRecord,
    },
    Get {
        keygroup: KeygroupName,
        record_key: String,
    },
    Delete {
        keygroup: KeygroupName,
        record_key: String,
    },
    /// Register a trigger-stream consumer.
    TriggerSubscribe {
        keygroup: KeygroupName,
        consumer: String,
    },
    /// Drain up to `max` pending trigger events for a consumer.
    TriggerPoll {
        keygroup: KeygroupName,
        consumer: String,
        max: u64,
    },
}

impl ClientOp {
    pub fn keygroup(&self) -> &KeygroupName {
        match self {
            ClientOp::Put { keygroup, .. }
            | ClientOp::Get { keygroup, .. }
            | ClientOp::Delete { keygroup, .. }
            | ClientOp::TriggerSubscribe { keygroup, .. }
            | ClientOp::TriggerPoll { keygroup, .. } => keygroup,
        }
    }

    /// The exact bytes a client proof signs.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = CLIENT_PROOF_CONTEXT.to_vec();
        out.extend_from_slice(&self.encode());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientRequest {
    /// An authenticated data-plane operation.
    Op { op: ClientOp, auth: AuthContext },
    /// Opaque relay of a sealed naming request; the daemon forwards it
    /// unopened and returns the sealed response unopened.
    NamingRelay { sealed: Vec<u8> },
    /// Advice that a keygroup's configuration changed; the daemon
    /// refreshes its cache. Carries no secrets and needs no auth.
    ConfigHint { keygroup: KeygroupName },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientReply {
    WriteAck { timestamp: u64, counter: u64 },
    /// Sealed record, or None for absent/expired/tombstoned keys.
    Record(Option<SealedRecord>),
    TriggerBatch(Vec<SealedRecord>),
    NamingResponse(Vec<u8>),
    HintAck,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("this node is not a replica node of the keygroup")]
    NotReplicaNode,
    #[error("this node is not a trigger node of the keygroup")]
    NotTriggerNode,
    #[error("caller is not authorized for this keygroup")]
    Forbidden,
    #[error("keygroup is unknown")]
    UnknownKeygroup,
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("sealed payload uses unknown secret version {0}")]
    UnknownSecretVersion(u64),
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("daemon unavailable: {0}")]
    Unavailable(String),
}

impl ClientError {
    fn code(&self) -> u8 {
        match self {
            ClientError::NotReplicaNode => 1,
            ClientError::NotTriggerNode => 2,
            ClientError::Forbidden => 3,
            ClientError::UnknownKeygroup => 4,
            ClientError::StorageFailure(_) => 5,
            ClientError::UnknownSecretVersion(_) => 6,
            ClientError::BadRequest(_) => 7,
            ClientError::Unavailable(_) => 8,
        }
    }

    /// Stable machine-parseable error name, used verbatim by the CLI.
    pub fn stable_name(&self) -> &'static str {
        match self {
            ClientError::NotReplicaNode => "NOT_REPLICA_NODE",
            ClientError::NotTriggerNode => "NOT_TRIGGER_NODE",
            ClientError::Forbidden => "FORBIDDEN",
            ClientError::UnknownKeygroup => "UNKNOWN_KEYGROUP",
            ClientError::StorageFailure(_) => "STORAGE_FAILURE",
            ClientError::UnknownSecretVersion(_) => "UNKNOWN_SECRET_VERSION",
            ClientError::BadRequest(_) => "BAD_REQUEST",
            ClientError::Unavailable(_) => "UNAVAILABLE",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome(pub Result<ClientReply, ClientError>);

/// Node-to-node recovery traffic on the direct channel. Record contents
/// stay sealed under the keygroup secret; holding the secret is what
/// authorizes reading them.
#[derive(Debug, Clone, PartialEq)]
pub enum PeerRequest {
    /// Ask the sender node for the listed missed counters of its stream.
    RecoverRange {
        keygroup: KeygroupName,
        counters: Vec<u64>,
    },
    /// Ask the sender node for its latest published counter.
    LatestCounter { keygroup: KeygroupName },
    /// Ask a replica for its full current record set (replica migration).
    StatePull { keygroup: KeygroupName },
}

/// Per-counter recovery outcome from the sender's bounded buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum RecoveryItem {
    /// The current record for the counter's key (not necessarily the
    /// historical version; intermediate versions are unrecoverable).
    Current(SealedRecord),
    /// The counter is still buffered but its record has since expired or
    /// been compacted away at the sender.
    Expired,
    /// The counter was evicted from the sender buffer: permanently lost.
    Evicted,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PeerReply {
    Recovered(Vec<(u64, RecoveryItem)>),
    Latest { counter: u64 },
    State(Vec<SealedRecord>),
    PeerError(String),
}

impl WireEncode for ClientOp {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, CLIENT_OP_TAG);
        match self {
            ClientOp::Put {
                keygroup,
                record_key,
                fields,
            } => {
                wire::put_u8(out, 0);
                keygroup.encode_into(out);
                wire::put_str(out, record_key);
                fields.encode_into(out);
            }
            ClientOp::Get { keygroup, record_key } => {
                wire::put_u8(out, 1);
                keygroup.encode_into(out);
                wire::put_str(out, record_key);
            }
            ClientOp::Delete { keygroup, record_key } => {
                wire::put_u8(out, 2);
                keygroup.encode_into(out);
                wire::put_str(out, record_key);
            }
            ClientOp::TriggerSubscribe { keygroup, consumer } => {
                wire::put_u8(out, 3);
                keygroup.encode_into(out);
                wire::put_str(out, consumer);
            }
            ClientOp::TriggerPoll {
                keygroup,
                consumer,
                max,
            } => {
                wire::put_u8(out, 4);
                keygroup.encode_into(out);
                wire::put_str(out, consumer);
                wire::put_u64(out, *max);
            }
        }
    }
}

impl WireDecode for ClientOp {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(CLIENT_OP_TAG)?;
        match r.get_u8()? {
            0 => Ok(ClientOp::Put {
                keygroup: KeygroupName::decode_from(r)?,
                record_key: r.get_str()?,
                fields: SealedRecord::decode_from(r)?,
            }),
            1 => Ok(ClientOp::Get {
                keygroup: KeygroupName::decode_from(r)?,
                record_key: r.get_str()?,
            }),
            2 => Ok(ClientOp::Delete {
                keygroup: KeygroupName::decode_from(r)?,
                record_key: r.get_str()?,
            }),
            3 => Ok(ClientOp::TriggerSubscribe {
                keygroup: KeygroupName::decode_from(r)?,
                consumer: r.get_str()?,
            }),
            4 => Ok(ClientOp::TriggerPoll {
                keygroup: KeygroupName::decode_from(r)?,
                consumer: r.get_str()?,
                max: r.get_u64()?,
            }),
            b => Err(DecodeError::invalid(format!("bad client op {b:#04x}"))),
        }
    }
}

impl WireEncode for ClientRequest {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, CLIENT_REQUEST_TAG);
        match self {
            ClientRequest::Op { op, auth } => {
                wire::put_u8(out, 0);
                op.encode_into(out);
                auth.encode_into(out);
            }
            ClientRequest::NamingRelay { sealed } => {
                wire::put_u8(out, 1);
                wire::put_bytes(out, sealed);
            }
            ClientRequest::ConfigHint { keygroup } => {
                wire::put_u8(out, 2);
                keygroup.encode_into(out);
            }
        }
    }
}

impl WireDecode for ClientRequest {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(CLIENT_REQUEST_TAG)?;
        match r.get_u8()? {
            0 => Ok(ClientRequest::Op {
                op: ClientOp::decode_from(r)?,
                auth: AuthContext::decode_from(r)?,
            }),
            1 => Ok(ClientRequest::NamingRelay { sealed: r.get_bytes()? }),
            2 => Ok(ClientRequest::ConfigHint {
                keygroup: KeygroupName::decode_from(r)?,
            }),
            b => Err(DecodeError::invalid(format!("bad client request {b:#04x}"))),
        }
    }
}

impl WireEncode for ClientReply {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, CLIENT_REPLY_TAG);
        match self {
            ClientReply::WriteAck { timestamp, counter } => {
                wire::put_u8(out, 0);
                wire::put_u64(out, *timestamp);
                wire::put_u64(out, *counter);
            }
            ClientReply::Record(record) => {
                wire::put_u8(out, 1);
                wire::put_option(out, record);
            }
            ClientReply::TriggerBatch(records) => {
                wire::put_u8(out, 2);
                wire::put_list(out, records);
            }
            ClientReply::NamingResponse(bytes) => {
                wire::put_u8(out, 3);
                wire::put_bytes(out, bytes);
            }
            ClientReply::HintAck => wire::put_u8(out, 4),
        }
    }
}

impl WireDecode for ClientReply {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(CLIENT_REPLY_TAG)?;
        match r.get_u8()? {
            0 => Ok(ClientReply::WriteAck {
                timestamp: r.get_u64()?,
                counter: r.get_u64()?,
            }),
            1 => Ok(ClientReply::Record(wire::get_option(r)?)),
            2 => Ok(ClientReply::TriggerBatch(wire::get_list(r)?)),
            3 => Ok(ClientReply::NamingResponse(r.get_bytes()?)),
            4 => Ok(ClientReply::HintAck),
            b => Err(DecodeError::invalid(format!("bad client reply {b:#04x}"))),
        }
    }
}

impl WireEncode for ClientOutcome {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, CLIENT_OUTCOME_TAG);
        match &self.0 {
            Ok(reply) => {
                wire::put_u8(out, 0);
                reply.encode_into(out);
            }
            Err(err) => {
                wire::put_u8(out, err.code());
                let detail = match err {
                    ClientError::StorageFailure(m)
                    | ClientError::BadRequest(m)
                    | ClientError::Unavailable(m) => m.clone(),
                    ClientError::UnknownSecretVersion(v) => v.to_string(),
                    _ => String::new(),
                };
                wire::put_str(out, &detail);
            }
        }
    }
}

impl WireDecode for ClientOutcome {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(CLIENT_OUTCOME_TAG)?;
        match r.get_u8()? {
            0 => Ok(ClientOutcome(Ok(ClientReply::decode_from(r)?))),
            code => {
                let detail = r.get_str()?;
                let err = match code {
                    1 => ClientError::NotReplicaNode,
                    2 => ClientError::NotTriggerNode,
                    3 => ClientError::Forbidden,
                    4 => ClientError::UnknownKeygroup,
                    5 => ClientError::StorageFailure(detail),
                    6 => ClientError::UnknownSecretVersion(detail.parse().unwrap_or(0)),
                    7 => ClientError::BadRequest(detail),
                    8 => ClientError::Unavailable(detail),
                    b => return Err(DecodeError::invalid(format!("bad client error code {b}"))),
                };
                Ok(ClientOutcome(Err(err)))
            }
        }
    }
}

impl WireEncode for PeerRequest {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, PEER_REQUEST_TAG);
        match self {
            PeerRequest::RecoverRange { keygroup, counters } => {
                wire::put_u8(out, 0);
                keygroup.encode_into(out);
                wire::put_u32(out, counters.len() as u32);
                for c in counters {
                    wire::put_u64(out, *c);
                }
            }
            PeerRequest::LatestCounter { keygroup } => {
                wire::put_u8(out, 1);
                keygroup.encode_into(out);
            }
            PeerRequest::StatePull { keygroup } => {
                wire::put_u8(out, 2);
                keygroup.encode_into(out);
            }
        }
    }
}

impl WireDecode for PeerRequest {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(PEER_REQUEST_TAG)?;
        match r.get_u8()? {
            0 => {
                let keygroup = KeygroupName::decode_from(r)?;
                let n = r.get_u32()? as usize;
                let mut counters = Vec::with_capacity(n.min(4096));
                for _ in 0..n {
                    counters.push(r.get_u64()?);
                }
                Ok(PeerRequest::RecoverRange { keygroup, counters })
            }
            1 => Ok(PeerRequest::LatestCounter {
                keygroup: KeygroupName::decode_from(r)?,
            }),
            2 => Ok(PeerRequest::StatePull {
                keygroup: KeygroupName::decode_from(r)?,
            }),
            b => Err(DecodeError::invalid(format!("bad peer request {b:#04x}"))),
        }
    }
}

impl WireEncode for RecoveryItem {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, RECOVERY_ITEM_TAG);
        match self {
            RecoveryItem::Current(sealed) => {
                wire::put_u8(out, 0);
                sealed.encode_into(out);
            }
            RecoveryItem::Expired => wire::put_u8(out, 1),
            RecoveryItem::Evicted => wire::put_u8(out, 2),
        }
    }
}

impl WireDecode for RecoveryItem {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(RECOVERY_ITEM_TAG)?;
        match r.get_u8()? {
            0 => Ok(RecoveryItem::Current(SealedRecord::decode_from(r)?)),
            1 => Ok(RecoveryItem::Expired),
            2 => Ok(RecoveryItem::Evicted),
            b => Err(DecodeError::invalid(format!("bad recovery item {b:#04x}"))),
        }
    }
}

impl WireEncode for PeerReply {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, PEER_REPLY_TAG);
        match self {
            PeerReply::Recovered(items) => {
                wire::put_u8(out, 0);
                wire::put_u32(out, items.len() as u32);
                for (counter, item) in items {
                    wire::put_u64(out, *counter);
                    item.encode_into(out);
                }
            }
            PeerReply::Latest { counter } => {
                wire::put_u8(out, 1);
                wire::put_u64(out, *counter);
            }
            PeerReply::State(records) => {
                wire::put_u8(out, 2);
                wire::put_list(out, records);
            }
            PeerReply::PeerError(msg) => {
                wire::put_u8(out, 3);
                wire::put_str(out, msg);
            }
        }
    }
}

impl WireDecode for PeerReply {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_tag(PEER_REPLY_TAG)?;
        match r.get_u8()? {
            0 => {
                let n = r.get_u32()? as usize;
                let mut items = Vec::with_capacity(n.min(4096));
                for _ in 0..n {
                    let counter = r.get_u64()?;
                    let item = RecoveryItem::decode_from(r)?;
                    items.push((counter, item));
                }
                Ok(PeerReply::Recovered(items))
            }
            1 => Ok(PeerReply::Latest { counter: r.get_u64()? }),
            2 => Ok(PeerReply::State(wire::get_list(r)?)),
            3 => Ok(PeerReply::PeerError(r.get_str()?)),
            b => Err(DecodeError::invalid(format!("bad peer reply {b:#04x}"))),
        }
    }
}

/// Convenience used by client sessions: an authenticated data-plane op.
pub fn signed_op(op: ClientOp, caller: &EntityId, keys: &crate::crypto::IdentityKeys) -> ClientRequest {
    let proof = crate::crypto::sign(keys, &op.signing_bytes());
    ClientRequest::Op {
        op,
        auth: AuthContext {
            caller: caller.clone(),
            proof,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kg() -> KeygroupName {
        KeygroupName::parse("a.b").unwrap()
    }

    #[test]
    fn client_request_round_trip() {
        let req = ClientRequest::Op {
            op: ClientOp::Get {
                keygroup: kg(),
                record_key: "t17".into(),
            },
            auth: AuthContext {
                caller: EntityId::client("c").unwrap(),
                proof: vec![9; 64],
            },
        };
        assert_eq!(ClientRequest::decode(&req.encode()).unwrap(), req);
    }

    #[test]
    fn outcome_round_trip() {
        let ok = ClientOutcome(Ok(ClientReply::WriteAck {
            timestamp: 7,
            counter: 3,
        }));
        assert_eq!(ClientOutcome::decode(&ok.encode()).unwrap(), ok);
        let err = ClientOutcome(Err(ClientError::UnknownSecretVersion(4)));
        assert_eq!(ClientOutcome::decode(&err.encode()).unwrap(), err);
    }

    #[test]
    fn peer_messages_round_trip() {
        let req = PeerRequest::RecoverRange {
            keygroup: kg(),
            counters: vec![2, 5, 9],
        };
        assert_eq!(PeerRequest::decode(&req.encode()).unwrap(), req);
        let reply = PeerReply::Recovered(vec![
            (
                2,
                RecoveryItem::Current(SealedRecord {
                    secret_version: 1,
                    nonce: [0; 12],
                    ciphertext: vec![1],
                }),
            ),
            (5, RecoveryItem::Evicted),
            (9, RecoveryItem::Expired),
        ]);
        assert_eq!(PeerReply::decode(&reply.encode()).unwrap(), reply);
    }
}

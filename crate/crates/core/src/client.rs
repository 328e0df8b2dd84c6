//! Client sessions: the application-side library behind the CLI and the
//! simulation scenarios.
//!
//! A session talks to any machine of a node (they are interchangeable),
//! holds the client identity keypair, caches keygroup secrets obtained
//! through authorized configuration reads, and exposes the declarative
//! keygroup API: an idempotent get-or-create setup call and a replica
//! swap for moving clients.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::crypto::{self, CryptoError, EntropySource, IdentityKeys, PublicKeySet, ReplayCache};
use crate::model::{DataRecord, EntityId, KeygroupMetadata, KeygroupName, NodeDescriptor, SecretVersion, Ttl};
use crate::naming::client::NamingAccess;
use crate::naming::protocol::{
    ConfigTarget, EntityDescriptor, KeygroupChange, NamingError, NamingOp, NamingReply, Region,
};
use crate::proto::{signed_op, ClientError, ClientOp, ClientOutcome, ClientReply, ClientRequest};
use crate::transport::{socket::socket_request, Bus, Endpoint, TransportError};
use crate::wire::{self, DecodeError, Reader, WireDecode, WireEncode};

const CLIENT_IDENTITY_TAG: u8 = 0x3D;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{0}")]
    Client(#[from] ClientError),
    #[error("naming: {0}")]
    Naming(#[from] NamingError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("crypto: {0}")]
    Crypto(#[from] CryptoError),
    #[error("movement with identical source and target replica")]
    NoOpMovement,
    #[error("decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("{0}")]
    Other(String),
}

/// A client identity as persisted on disk: the id plus the keypair seeds.
/// This is a file format, never a wire message.
pub struct ClientIdentity {
    pub id: EntityId,
    pub keys: Arc<IdentityKeys>,
}

impl ClientIdentity {
    pub fn generate(name: &str, entropy: &dyn EntropySource) -> Result<Self, SessionError> {
        Ok(ClientIdentity {
            id: EntityId::client(name).map_err(|e| SessionError::Other(e.to_string()))?,
            keys: Arc::new(IdentityKeys::generate(entropy)),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (sign_seed, exch_seed) = self.keys.seeds();
        let mut out = vec![wire::WIRE_FORMAT_V1, CLIENT_IDENTITY_TAG];
        self.id.encode_into(&mut out);
        out.extend_from_slice(&sign_seed);
        out.extend_from_slice(&exch_seed);
        out
    }

    pub fn from_bytes(bytes: &[u8], counter_base: u64) -> Result<Self, SessionError> {
        let mut r = Reader::new(bytes);
        let version = r.get_u8()?;
        if version != wire::WIRE_FORMAT_V1 {
            return Err(SessionError::Decode(DecodeError::UnsupportedVersion(version)));
        }
        r.expect_tag(CLIENT_IDENTITY_TAG)?;
        let id = EntityId::decode_from(&mut r)?;
        let sign_seed = r.get_array::<32>()?;
        let exch_seed = r.get_array::<32>()?;
        r.finish()?;
        Ok(ClientIdentity {
            id,
            keys: Arc::new(IdentityKeys::from_seeds(sign_seed, exch_seed).with_counter_base(counter_base)),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SessionError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| SessionError::Other(e.to_string()))
    }

    pub fn load(path: &Path, counter_base: u64) -> Result<Self, SessionError> {
        let bytes = std::fs::read(path).map_err(|e| SessionError::Other(e.to_string()))?;
        Self::from_bytes(&bytes, counter_base)
    }

    pub fn public(&self) -> PublicKeySet {
        self.keys.public()
    }
}

/// How a session reaches daemons: over an in-process bus (with its own
/// endpoint) or via plain sockets.
pub enum Channel {
    Bus { bus: Arc<dyn Bus>, endpoint: Endpoint },
    Socket,
}

impl Channel {
    fn request(&self, to: &Endpoint, payload: &[u8], timeout_ms: u64) -> Result<Vec<u8>, TransportError> {
        match self {
            Channel::Bus { bus, endpoint } => bus.request(endpoint, to, payload, timeout_ms),
            Channel::Socket => socket_request(&to.addr, payload, timeout_ms),
        }
    }
}

pub struct ClientSession {
    identity: ClientIdentity,
    channel: Channel,
    target: Mutex<Endpoint>,
    naming_public: PublicKeySet,
    entropy: Arc<dyn EntropySource>,
    naming_replays: ReplayCache,
    /// Cached keygroup metadata versions and usable secrets, newest first.
    keygroups: Mutex<BTreeMap<KeygroupName, (u64, Vec<SecretVersion>)>>,
    timeout_ms: u64,
}

impl ClientSession {
    pub fn new(
        identity: ClientIdentity,
        channel: Channel,
        target: Endpoint,
        naming_public: PublicKeySet,
        entropy: Arc<dyn EntropySource>,
        timeout_ms: u64,
    ) -> Self {
        ClientSession {
            identity,
            channel,
            target: Mutex::new(target),
            naming_public,
            entropy,
            naming_replays: ReplayCache::new(),
            keygroups: Mutex::new(BTreeMap::new()),
            timeout_ms,
        }
    }

    pub fn client_id(&self) -> &EntityId {
        &self.identity.id
    }

    /// Any machine of a node is an equivalent target.
    pub fn set_target(&self, target: Endpoint) {
        *self.target.lock().unwrap() = target;
    }

    pub fn target(&self) -> Endpoint {
        self.target.lock().unwrap().clone()
    }

    fn roundtrip(&self, request: &ClientRequest) -> Result<ClientReply, SessionError> {
        let target = self.target();
        let response = self.channel.request(&target, &request.encode(), self.timeout_ms)?;
        let outcome = ClientOutcome::decode(&response)?;
        outcome.0.map_err(SessionError::Client)
    }

    fn send_op(&self, op: ClientOp) -> Result<ClientReply, SessionError> {
        let request = signed_op(op, &self.identity.id, &self.identity.keys);
        self.roundtrip(&request)
    }

    // ------------------------------------------------------------------
    // Naming operations (relayed end-to-end encrypted through the daemon)
    // ------------------------------------------------------------------

    pub fn naming_op(&self, op: NamingOp) -> Result<NamingReply, SessionError> {
        let access = NamingAccess {
            sender: self.identity.id.clone(),
            keys: self.identity.keys.clone(),
            naming_public: self.naming_public.clone(),
            entropy: self.entropy.clone(),
        };
        let sealed = access.seal_op(&self.identity.id, &self.identity.keys, op);
        let reply = self.roundtrip(&ClientRequest::NamingRelay { sealed })?;
        let ClientReply::NamingResponse(bytes) = reply else {
            return Err(SessionError::Other("unexpected relay reply".into()));
        };
        Ok(access.open_outcome(&bytes, &self.naming_replays)?)
    }

    /// Fetches keygroup metadata (with the secret, as an authorized
    /// client) and refreshes the local secret cache.
    pub fn fetch_keygroup(&self, kg: &KeygroupName) -> Result<KeygroupMetadata, SessionError> {
        let cached_version = self.keygroups.lock().unwrap().get(kg).map(|(v, _)| *v);
        match self.naming_op(NamingOp::GetConfig {
            target: ConfigTarget::Keygroup(kg.clone()),
            cached_version,
        })? {
            NamingReply::Metadata(meta) => {
                self.adopt_metadata(&meta);
                Ok(meta)
            }
            NamingReply::UpToDate => {
                // Still need the full value once; refetch without a version.
                match self.naming_op(NamingOp::GetConfig {
                    target: ConfigTarget::Keygroup(kg.clone()),
                    cached_version: None,
                })? {
                    NamingReply::Metadata(meta) => {
                        self.adopt_metadata(&meta);
                        Ok(meta)
                    }
                    other => Err(SessionError::Other(format!("unexpected naming reply {other:?}"))),
                }
            }
            other => Err(SessionError::Other(format!("unexpected naming reply {other:?}"))),
        }
    }

    fn adopt_metadata(&self, meta: &KeygroupMetadata) {
        let mut keygroups = self.keygroups.lock().unwrap();
        let entry = keygroups
            .entry(meta.name.clone())
            .or_insert_with(|| (0, Vec::new()));
        entry.0 = meta.version;
        if !entry.1.iter().any(|s| s.version == meta.secret.version) {
            entry.1.insert(0, meta.secret.clone());
        }
        entry.1.sort_by(|a, b| b.version.cmp(&a.version));
        entry.1.truncate(4);
    }

    fn secrets_for(&self, kg: &KeygroupName) -> Result<Vec<SecretVersion>, SessionError> {
        {
            let keygroups = self.keygroups.lock().unwrap();
            if let Some((_, secrets)) = keygroups.get(kg) {
                if !secrets.is_empty() {
                    return Ok(secrets.clone());
                }
            }
        }
        self.fetch_keygroup(kg)?;
        let keygroups = self.keygroups.lock().unwrap();
        keygroups
            .get(kg)
            .map(|(_, s)| s.clone())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| SessionError::Other("no secret available for keygroup".into()))
    }

    // ------------------------------------------------------------------
    // Data plane
    // ------------------------------------------------------------------

    pub fn put(
        &self,
        kg: &KeygroupName,
        record_key: &str,
        fields: BTreeMap<String, Vec<u8>>,
    ) -> Result<(u64, u64), SessionError> {
        let attempt = |secrets: &[SecretVersion]| -> Result<ClientReply, SessionError> {
            let sealed = crypto::seal_fields(&fields, &secrets[0], self.entropy.as_ref());
            self.send_op(ClientOp::Put {
                keygroup: kg.clone(),
                record_key: record_key.to_string(),
                fields: sealed,
            })
        };
        let secrets = self.secrets_for(kg)?;
        let reply = match attempt(&secrets) {
            Err(SessionError::Client(ClientError::UnknownSecretVersion(_))) => {
                // Stale secret cache (rotation happened): refresh and retry.
                self.fetch_keygroup(kg)?;
                attempt(&self.secrets_for(kg)?)?
            }
            other => other?,
        };
        match reply {
            ClientReply::WriteAck { timestamp, counter } => Ok((timestamp, counter)),
            other => Err(SessionError::Other(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn get(&self, kg: &KeygroupName, record_key: &str) -> Result<Option<DataRecord>, SessionError> {
        let reply = self.send_op(ClientOp::Get {
            keygroup: kg.clone(),
            record_key: record_key.to_string(),
        })?;
        let ClientReply::Record(sealed) = reply else {
            return Err(SessionError::Other("unexpected reply".into()));
        };
        let Some(sealed) = sealed else { return Ok(None) };
        let secrets = self.secrets_for(kg)?;
        match crypto::open_record(&sealed, secrets.iter()) {
            Ok(record) => Ok(Some(record)),
            Err(CryptoError::UnknownSecretVersion(_)) => {
                self.fetch_keygroup(kg)?;
                let secrets = self.secrets_for(kg)?;
                Ok(Some(crypto::open_record(&sealed, secrets.iter())?))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn delete(&self, kg: &KeygroupName, record_key: &str) -> Result<(u64, u64), SessionError> {
        let reply = self.send_op(ClientOp::Delete {
            keygroup: kg.clone(),
            record_key: record_key.to_string(),
        })?;
        match reply {
            ClientReply::WriteAck { timestamp, counter } => Ok((timestamp, counter)),
            other => Err(SessionError::Other(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn trigger_subscribe(&self, kg: &KeygroupName, consumer: &str) -> Result<(), SessionError> {
        self.send_op(ClientOp::TriggerSubscribe {
            keygroup: kg.clone(),
            consumer: consumer.to_string(),
        })?;
        Ok(())
    }

    pub fn trigger_poll(&self, kg: &KeygroupName, consumer: &str, max: u64) -> Result<Vec<DataRecord>, SessionError> {
        let reply = self.send_op(ClientOp::TriggerPoll {
            keygroup: kg.clone(),
            consumer: consumer.to_string(),
            max,
        })?;
        let ClientReply::TriggerBatch(sealed_batch) = reply else {
            return Err(SessionError::Other("unexpected reply".into()));
        };
        let secrets = self.secrets_for(kg)?;
        let mut records = Vec::with_capacity(sealed_batch.len());
        for sealed in sealed_batch {
            match crypto::open_record(&sealed, secrets.iter()) {
                Ok(record) => records.push(record),
                Err(CryptoError::UnknownSecretVersion(_)) => {
                    self.fetch_keygroup(kg)?;
                    let secrets = self.secrets_for(kg)?;
                    records.push(crypto::open_record(&sealed, secrets.iter())?);
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(records)
    }

    pub fn query_nodes(
        &self,
        min_lat: f64,
        min_lon: f64,
        max_lat: f64,
        max_lon: f64,
    ) -> Result<Vec<NodeDescriptor>, SessionError> {
        match self.naming_op(NamingOp::QueryNodesByRegion {
            region: Region {
                min_lat,
                min_lon,
                max_lat,
                max_lon,
            },
        })? {
            NamingReply::Nodes(nodes) => Ok(nodes),
            other => Err(SessionError::Other(format!("unexpected naming reply {other:?}"))),
        }
    }

    // ------------------------------------------------------------------
    // Declarative keygroup API
    // ------------------------------------------------------------------

    pub fn create_keygroup(
        &self,
        kg: &KeygroupName,
        initial_replica: &EntityId,
        ttl: Ttl,
    ) -> Result<KeygroupMetadata, SessionError> {
        match self.naming_op(NamingOp::CreateKeygroup {
            name: kg.clone(),
            initial_replica: initial_replica.clone(),
            initial_ttl: ttl,
        })? {
            NamingReply::Metadata(meta) => {
                self.adopt_metadata(&meta);
                self.hint_members(&meta);
                Ok(meta)
            }
            other => Err(SessionError::Other(format!("unexpected naming reply {other:?}"))),
        }
    }

    pub fn update_keygroup(&self, kg: &KeygroupName, change: KeygroupChange) -> Result<KeygroupMetadata, SessionError> {
        let affected = match &change {
            KeygroupChange::AddReplica { node, .. }
            | KeygroupChange::AddTrigger { node }
            | KeygroupChange::RemoveReplica { node }
            | KeygroupChange::RemoveTrigger { node } => Some(node.clone()),
            _ => None,
        };
        match self.naming_op(NamingOp::UpdateKeygroup {
            name: kg.clone(),
            change,
        })? {
            NamingReply::Metadata(meta) => {
                self.adopt_metadata(&meta);
                self.hint_members(&meta);
                // Nodes that just left still deserve a hint so they purge.
                if let Some(node) = affected {
                    if !meta.is_member(&node) {
                        self.hint_node(&node, kg);
                    }
                }
                Ok(meta)
            }
            other => Err(SessionError::Other(format!("unexpected naming reply {other:?}"))),
        }
    }

    /// Idempotent get-or-create: ensures the keygroup exists with at least
    /// the given replicas, triggers and clients. Calling it again with the
    /// same arguments changes nothing but the observation.
    pub fn setup_keygroup(
        &self,
        kg: &KeygroupName,
        replicas: &[(EntityId, Ttl)],
        triggers: &[EntityId],
        clients: &[EntityId],
    ) -> Result<KeygroupMetadata, SessionError> {
        if replicas.is_empty() {
            return Err(SessionError::Other("setup needs at least one replica".into()));
        }
        let mut meta = match self.fetch_keygroup(kg) {
            Ok(meta) => meta,
            Err(SessionError::Naming(NamingError::NotFound)) => {
                self.create_keygroup(kg, &replicas[0].0, replicas[0].1)?
            }
            Err(e) => return Err(e),
        };
        for (node, ttl) in replicas {
            if !meta.is_replica(node) {
                meta = self.update_keygroup(kg, KeygroupChange::AddReplica {
                    node: node.clone(),
                    ttl: *ttl,
                })?;
            } else if meta.ttl_for(node) != Some(*ttl) {
                meta = self.update_keygroup(kg, KeygroupChange::SetTtl {
                    node: node.clone(),
                    ttl: *ttl,
                })?;
            }
        }
        for node in triggers {
            if !meta.is_trigger(node) {
                meta = self.update_keygroup(kg, KeygroupChange::AddTrigger { node: node.clone() })?;
            }
        }
        for client in clients {
            if !meta.is_authorized_client(client) {
                meta = self.update_keygroup(kg, KeygroupChange::AddClient {
                    client: client.clone(),
                })?;
            }
        }
        self.hint_members(&meta);
        Ok(meta)
    }

    /// Replica swap for a moving client: add the new replica before
    /// removing the old one, so the replica count never drops and the
    /// secret rotates exactly once (on the removal).
    pub fn on_movement(
        &self,
        kg: &KeygroupName,
        old_replica: &EntityId,
        new_replica: &EntityId,
    ) -> Result<KeygroupMetadata, SessionError> {
        if old_replica == new_replica {
            return Err(SessionError::NoOpMovement);
        }
        let meta = self.fetch_keygroup(kg)?;
        let Some(ttl) = meta.ttl_for(old_replica) else {
            return Err(SessionError::Naming(NamingError::UnknownNode));
        };
        self.update_keygroup(kg, KeygroupChange::AddReplica {
            node: new_replica.clone(),
            ttl,
        })?;
        let meta = self.update_keygroup(kg, KeygroupChange::RemoveReplica {
            node: old_replica.clone(),
        })?;
        Ok(meta)
    }

    // ------------------------------------------------------------------
    // Config hints
    // ------------------------------------------------------------------

    /// Recipients create their own subscriptions; hints just tell the
    /// affected nodes that there is something new to look at. Best-effort:
    /// periodic refresh covers lost hints.
    fn hint_members(&self, meta: &KeygroupMetadata) {
        for node in meta.member_nodes() {
            self.hint_node(&node, &meta.name);
        }
    }

    fn hint_node(&self, node: &EntityId, kg: &KeygroupName) {
        let Ok(NamingReply::Entity { descriptor, .. }) = self.naming_op(NamingOp::GetConfig {
            target: ConfigTarget::Entity(node.clone()),
            cached_version: None,
        }) else {
            return;
        };
        let EntityDescriptor::Node(node_desc) = descriptor else { return };
        let hint = ClientRequest::ConfigHint { keygroup: kg.clone() }.encode();
        for machine_id in &node_desc.machine_ids {
            let Ok(NamingReply::Entity { descriptor, .. }) = self.naming_op(NamingOp::GetConfig {
                target: ConfigTarget::Entity(machine_id.clone()),
                cached_version: None,
            }) else {
                continue;
            };
            let EntityDescriptor::Machine(machine) = descriptor else { continue };
            let endpoint = Endpoint::with_addr(machine.id.name(), machine.address.clone());
            let _ = self.channel.request(&endpoint, &hint, self.timeout_ms);
        }
    }
}

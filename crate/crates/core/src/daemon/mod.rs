//! The per-machine runtime.
//!
//! A daemon serves client requests, publishes updates with sequential
//! counters, receives and merges remote updates, detects and repairs
//! counter gaps, distributes per-remote-node responsibility among its
//! node's machines, sweeps TTLs, refreshes cached configuration, and
//! feeds trigger-node event streams. All cross-machine shared state lives
//! in the node's storage connector, so machines stay stateless and
//! interchangeable.

pub mod events;
mod replication;
pub mod responsibility;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use crate::crypto::{self, EntropySource, IdentityKeys, PublicKeySet};
use crate::model::{DataRecord, EntityId, KeygroupName, Ttl};
use crate::naming::client::{NamingAccess, NamingClient};
use crate::naming::protocol::{ConfigTarget, EntityDescriptor, NamingError, NamingOp, NamingReply};
use crate::proto::{
    ClientError, ClientOp, ClientOutcome, ClientReply, ClientRequest, CLIENT_REQUEST_TAG, PEER_REQUEST_TAG,
};
use crate::storage::{get_visible, CachedKeygroup, StorageConnector, StorageError};
use crate::transport::{Bus, Clock, Endpoint, SubscriptionHandle, Timers, Topic};
use crate::wire::{WireDecode, WireEncode};

use events::{ClientOpKind, DaemonEvent, EventSink};

/// Virtual service-time model, charged against the simulated clock so
/// latency and staleness measurements have realistic structure. All zeros
/// (the default) charges nothing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostModel {
    pub verify_ms: u64,
    pub storage_get_ms: u64,
    pub storage_put_ms: u64,
    pub storage_delete_ms: u64,
    pub seal_ms: u64,
    pub open_ms: u64,
    pub publish_ms: u64,
}

#[derive(Debug, Clone)]
pub struct DaemonParams {
    /// Sender buffer capacity B: how many recent (counter, key) pairs are
    /// kept per keygroup for gap recovery.
    pub sender_buffer_capacity: usize,
    pub heartbeat_period_ms: u64,
    pub machine_timeout_ms: u64,
    /// Base period of the TTL sweep; the effective period shrinks to
    /// min(ttl, 1s)/2 (floor 50 ms) when a keygroup has a short TTL.
    pub sweep_period_ms: u64,
    pub refresh_period_ms: u64,
    /// Period of the receiver-initiated counter probe that catches tail
    /// losses no later message would reveal. Zero disables probing.
    pub probe_period_ms: u64,
    pub retry_base_ms: u64,
    pub retry_cap_ms: u64,
    pub request_timeout_ms: u64,
    /// How long superseded keygroup secrets stay usable for in-flight
    /// pre-rotation messages.
    pub secret_grace_ms: u64,
    /// Tombstone compaction horizon when every TTL is disabled.
    pub compaction_fallback_ms: u64,
    /// Pull existing records when this node becomes a replica of a
    /// keygroup that already has data elsewhere.
    pub migration_pull: bool,
    pub costs: CostModel,
}

impl Default for DaemonParams {
    fn default() -> Self {
        DaemonParams {
            sender_buffer_capacity: 64,
            heartbeat_period_ms: 500,
            machine_timeout_ms: 2_000,
            sweep_period_ms: 250,
            refresh_period_ms: 1_000,
            probe_period_ms: 2_000,
            retry_base_ms: 100,
            retry_cap_ms: 5_000,
            request_timeout_ms: 150,
            secret_grace_ms: 60_000,
            compaction_fallback_ms: 86_400_000,
            migration_pull: true,
            costs: CostModel::default(),
        }
    }
}

pub struct DaemonConfig {
    pub node_id: EntityId,
    pub machine_id: EntityId,
    pub endpoint: Endpoint,
    pub keys: Arc<IdentityKeys>,
    pub naming_endpoint: Endpoint,
    pub naming_public: PublicKeySet,
    pub params: DaemonParams,
}

pub struct Daemon {
    cfg: DaemonConfig,
    bus: Arc<dyn Bus>,
    clock: Arc<dyn Clock>,
    timers: Arc<dyn Timers>,
    connector: Arc<dyn StorageConnector>,
    entropy: Arc<dyn EntropySource>,
    events: EventSink,
    naming: NamingClient,
    alive: AtomicBool,
    subs: Mutex<BTreeMap<KeygroupName, SubscriptionHandle>>,
    /// Cached registry entries; node descriptors re-validate periodically
    /// because their machine lists change.
    entities: Mutex<BTreeMap<EntityId, (EntityDescriptor, u64)>>,
}

impl Daemon {
    pub fn start(
        cfg: DaemonConfig,
        bus: Arc<dyn Bus>,
        clock: Arc<dyn Clock>,
        timers: Arc<dyn Timers>,
        connector: Arc<dyn StorageConnector>,
        entropy: Arc<dyn EntropySource>,
        events: EventSink,
    ) -> Result<Arc<Self>, StorageError> {
        let access = NamingAccess {
            sender: cfg.machine_id.clone(),
            keys: cfg.keys.clone(),
            naming_public: cfg.naming_public.clone(),
            entropy: entropy.clone(),
        };
        let naming = NamingClient::new(
            access,
            bus.clone(),
            cfg.endpoint.clone(),
            cfg.naming_endpoint.clone(),
            cfg.params.request_timeout_ms,
        );
        let daemon = Arc::new(Daemon {
            cfg,
            bus,
            clock,
            timers,
            connector,
            entropy,
            events,
            naming,
            alive: AtomicBool::new(true),
            subs: Mutex::new(BTreeMap::new()),
            entities: Mutex::new(BTreeMap::new()),
        });

        let weak = Arc::downgrade(&daemon);
        daemon
            .bus
            .register_endpoint(
                &daemon.cfg.endpoint,
                Arc::new(move |_from, payload| match weak.upgrade() {
                    Some(d) => d.dispatch(payload),
                    None => Vec::new(),
                }),
            )
            .map_err(StorageError::failure)?;

        daemon.connector.heartbeat(&daemon.cfg.machine_id, daemon.clock.now_ms())?;
        daemon.rebalance();
        daemon.schedule_timers();
        Ok(daemon)
    }

    /// Stops serving: timers lapse, the endpoint unregisters and all
    /// subscriptions drop. Used by the harness to crash a machine.
    pub fn shutdown(&self) {
        self.alive.store(false, Ordering::SeqCst);
        self.bus.unregister_endpoint(&self.cfg.endpoint.name);
        let mut subs = self.subs.lock().unwrap();
        for (_, handle) in std::mem::take(&mut *subs) {
            self.bus.unsubscribe(&handle);
        }
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    pub fn node_id(&self) -> &EntityId {
        &self.cfg.node_id
    }

    pub fn machine_id(&self) -> &EntityId {
        &self.cfg.machine_id
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.cfg.endpoint
    }

    pub fn connector(&self) -> &Arc<dyn StorageConnector> {
        &self.connector
    }

    fn emit(&self, event: DaemonEvent) {
        (self.events)(&event);
    }

    fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    // ------------------------------------------------------------------
    // Timers
    // ------------------------------------------------------------------

    fn schedule_timers(self: &Arc<Self>) {
        self.schedule_recurring(self.cfg.params.heartbeat_period_ms, |d| d.heartbeat_tick());
        self.schedule_recurring(self.cfg.params.refresh_period_ms, |d| d.config_refresh_tick());
        if self.cfg.params.probe_period_ms > 0 {
            self.schedule_recurring(self.cfg.params.probe_period_ms, |d| d.probe_tick());
        }
        let sweep = self.effective_sweep_period();
        self.schedule_in(sweep, |d| d.sweep_and_reschedule());
    }

    fn sweep_and_reschedule(self: &Arc<Self>) {
        self.sweep_tick();
        let next = self.effective_sweep_period();
        self.schedule_in(next, |d| d.sweep_and_reschedule());
    }

    /// Sweep period: half the shortest enabled TTL capped at 1 s, floor
    /// 50 ms, bounding how stale an expired record can look.
    fn effective_sweep_period(&self) -> u64 {
        let mut shortest: Option<u64> = None;
        if let Ok(configs) = self.connector.cached_configs() {
            for cfg in configs {
                if let Some(Ttl::Millis(ms)) = cfg.metadata.ttl_for(&self.cfg.node_id) {
                    shortest = Some(shortest.map_or(ms, |s: u64| s.min(ms)));
                }
            }
        }
        match shortest {
            Some(ttl) => (ttl.min(1_000) / 2).max(50),
            None => self.cfg.params.sweep_period_ms,
        }
    }

    fn schedule_recurring(self: &Arc<Self>, period_ms: u64, tick: fn(&Arc<Daemon>)) {
        fn arm(daemon: &Arc<Daemon>, period_ms: u64, tick: fn(&Arc<Daemon>)) {
            let weak = Arc::downgrade(daemon);
            daemon.timers.schedule_ms(
                period_ms,
                Box::new(move || {
                    if let Some(d) = weak.upgrade() {
                        if d.is_alive() {
                            tick(&d);
                            arm(&d, period_ms, tick);
                        }
                    }
                }),
            );
        }
        arm(self, period_ms, tick);
    }

    pub(crate) fn schedule_in(self: &Arc<Self>, delay_ms: u64, f: impl FnOnce(&Arc<Daemon>) + Send + 'static) {
        let weak = Arc::downgrade(self);
        self.timers.schedule_ms(
            delay_ms,
            Box::new(move || {
                if let Some(d) = weak.upgrade() {
                    if d.is_alive() {
                        f(&d);
                    }
                }
            }),
        );
    }

    fn heartbeat_tick(self: &Arc<Self>) {
        let _ = self.connector.heartbeat(&self.cfg.machine_id, self.now());
        self.rebalance();
    }

    fn sweep_tick(self: &Arc<Self>) {
        let now = self.now();
        let horizon = self.compaction_horizon();
        let Ok(keygroups) = self.connector.registered_keygroups() else {
            return;
        };
        for kg in keygroups {
            let ttl = self
                .connector
                .get_cached_config(&kg)
                .ok()
                .flatten()
                .and_then(|c| c.metadata.ttl_for(&self.cfg.node_id))
                .unwrap_or(Ttl::Disabled);
            if let Ok(keys) = self.connector.sweep_expired(&kg, ttl, now) {
                if !keys.is_empty() {
                    self.emit(DaemonEvent::SweepExpired {
                        node: self.cfg.node_id.clone(),
                        keygroup: kg.clone(),
                        keys,
                    });
                }
            }
            let _ = self.connector.compact_tombstones(&kg, horizon, now);
        }
    }

    /// Tombstones are retained 10x the largest enabled TTL, or a fixed
    /// fallback when every TTL is disabled.
    fn compaction_horizon(&self) -> u64 {
        let mut largest: Option<u64> = None;
        if let Ok(configs) = self.connector.cached_configs() {
            for cfg in configs {
                for replica_cfg in cfg.metadata.replica_nodes.values() {
                    if let Ttl::Millis(ms) = replica_cfg.ttl {
                        largest = Some(largest.map_or(ms, |l: u64| l.max(ms)));
                    }
                }
            }
        }
        match largest {
            Some(ttl) => ttl.saturating_mul(10),
            None => self.cfg.params.compaction_fallback_ms,
        }
    }

    fn config_refresh_tick(self: &Arc<Self>) {
        self.config_refresh();
        self.refresh_entities();
    }

    // ------------------------------------------------------------------
    // Configuration cache
    // ------------------------------------------------------------------

    /// Re-validates every cached keygroup configuration against the naming
    /// service. On change: secrets, TTLs and subscriptions follow the new
    /// membership; if this node was removed the keygroup's secret and
    /// subscriptions are purged. When the naming service is unreachable
    /// the cache stands and the node keeps serving.
    pub fn config_refresh(self: &Arc<Self>) {
        let Ok(configs) = self.connector.cached_configs() else {
            return;
        };
        for cached in configs {
            let kg = cached.metadata.name.clone();
            match self.naming.call(
                &self.cfg.node_id,
                &self.cfg.keys,
                NamingOp::GetConfig {
                    target: ConfigTarget::Keygroup(kg.clone()),
                    cached_version: Some(cached.metadata.version),
                },
            ) {
                Ok(NamingReply::UpToDate) => {}
                Ok(NamingReply::Metadata(meta)) => self.apply_config(meta),
                Ok(_) => {}
                Err(NamingError::Forbidden) => self.purge_keygroup(&kg),
                Err(NamingError::Unreachable) => {
                    self.emit(DaemonEvent::NamingUnreachable {
                        node: self.cfg.node_id.clone(),
                        machine: self.cfg.machine_id.clone(),
                    });
                    return; // keep cache, retry next period
                }
                Err(e) => {
                    log::warn!("{}: config refresh for {kg} failed: {e}", self.cfg.machine_id);
                }
            }
        }
    }

    /// Fetches and applies one keygroup's configuration immediately
    /// (config hints and lazy fetches).
    pub fn refresh_keygroup(self: &Arc<Self>, kg: &KeygroupName) -> Result<CachedKeygroup, ClientError> {
        let cached_version = self
            .connector
            .get_cached_config(kg)
            .ok()
            .flatten()
            .map(|c| c.metadata.version);
        match self.naming.call(
            &self.cfg.node_id,
            &self.cfg.keys,
            NamingOp::GetConfig {
                target: ConfigTarget::Keygroup(kg.clone()),
                cached_version,
            },
        ) {
            Ok(NamingReply::UpToDate) => self
                .connector
                .get_cached_config(kg)
                .map_err(|e| ClientError::StorageFailure(e.to_string()))?
                .ok_or(ClientError::UnknownKeygroup),
            Ok(NamingReply::Metadata(meta)) => {
                self.apply_config(meta);
                self.connector
                    .get_cached_config(kg)
                    .map_err(|e| ClientError::StorageFailure(e.to_string()))?
                    .ok_or(ClientError::UnknownKeygroup)
            }
            Ok(_) => Err(ClientError::Unavailable("unexpected naming reply".into())),
            Err(NamingError::Forbidden) => {
                self.purge_keygroup(kg);
                Err(ClientError::Forbidden)
            }
            Err(NamingError::NotFound) => Err(ClientError::UnknownKeygroup),
            Err(NamingError::Unreachable) => Err(ClientError::Unavailable("naming service unreachable".into())),
            Err(e) => Err(ClientError::Unavailable(e.to_string())),
        }
    }

    /// The cached configuration, fetching it on first use.
    pub(crate) fn ensure_config(self: &Arc<Self>, kg: &KeygroupName) -> Result<CachedKeygroup, ClientError> {
        if let Ok(Some(cached)) = self.connector.get_cached_config(kg) {
            return Ok(cached);
        }
        self.refresh_keygroup(kg)
    }

    fn apply_config(self: &Arc<Self>, meta: crate::model::KeygroupMetadata) {
        let kg = meta.name.clone();
        let now = self.now();
        if !meta.is_member(&self.cfg.node_id) {
            self.purge_keygroup(&kg);
            return;
        }
        let was_replica = self
            .connector
            .get_cached_config(&kg)
            .ok()
            .flatten()
            .map(|c| c.metadata.is_replica(&self.cfg.node_id))
            .unwrap_or(false);

        if self.connector.register_keygroup(&kg).is_err() {
            return;
        }
        let mut cached = match self.connector.get_cached_config(&kg) {
            Ok(Some(existing)) => existing,
            _ => CachedKeygroup::new(meta.clone(), now),
        };
        if cached.metadata.version <= meta.version {
            cached.adopt(meta.clone(), now, self.cfg.params.secret_grace_ms);
        }
        let version = cached.metadata.version;
        let secret_version = cached.metadata.secret.version;
        if self.connector.put_cached_config(&cached).is_err() {
            return;
        }
        self.emit(DaemonEvent::ConfigRefreshed {
            node: self.cfg.node_id.clone(),
            keygroup: kg.clone(),
            version,
            secret_version,
        });
        self.rebalance();

        // Replica migration: a node that just became a replica pulls the
        // existing records from the smallest remaining replica node.
        let is_replica_now = meta.is_replica(&self.cfg.node_id);
        if self.cfg.params.migration_pull && is_replica_now && !was_replica {
            let source = meta
                .replica_nodes
                .keys()
                .filter(|n| *n != &self.cfg.node_id)
                .min()
                .cloned();
            if let Some(source) = source {
                let kg = kg.clone();
                self.schedule_in(0, move |d| d.state_pull(&kg, &source, 0));
            }
        }
    }

    fn purge_keygroup(self: &Arc<Self>, kg: &KeygroupName) {
        let _ = self.connector.remove_cached_config(kg);
        let handle = self.subs.lock().unwrap().remove(kg);
        if let Some(handle) = handle {
            self.bus.unsubscribe(&handle);
            self.emit(DaemonEvent::SubscriptionChanged {
                machine: self.cfg.machine_id.clone(),
                keygroup: kg.clone(),
                subscribed: false,
            });
        }
        self.emit(DaemonEvent::ConfigPurged {
            node: self.cfg.node_id.clone(),
            keygroup: kg.clone(),
        });
    }

    // ------------------------------------------------------------------
    // Registry cache
    // ------------------------------------------------------------------

    pub(crate) fn resolve_entity(&self, id: &EntityId) -> Result<EntityDescriptor, ClientError> {
        if let Some((descriptor, _)) = self.entities.lock().unwrap().get(id) {
            return Ok(descriptor.clone());
        }
        match self.naming.call(
            &self.cfg.node_id,
            &self.cfg.keys,
            NamingOp::GetConfig {
                target: ConfigTarget::Entity(id.clone()),
                cached_version: None,
            },
        ) {
            Ok(NamingReply::Entity { descriptor, version }) => {
                self.entities
                    .lock()
                    .unwrap()
                    .insert(id.clone(), (descriptor.clone(), version));
                Ok(descriptor)
            }
            Ok(_) => Err(ClientError::Unavailable("unexpected naming reply".into())),
            Err(NamingError::NotFound) => Err(ClientError::Forbidden),
            Err(NamingError::Unreachable) => Err(ClientError::Unavailable("naming service unreachable".into())),
            Err(e) => Err(ClientError::Unavailable(e.to_string())),
        }
    }

    /// Re-validates cached node descriptors (their machine lists change
    /// when machines come and go).
    fn refresh_entities(self: &Arc<Self>) {
        let snapshot: Vec<(EntityId, u64)> = self
            .entities
            .lock()
            .unwrap()
            .iter()
            .filter(|(id, _)| matches!(id.kind(), crate::model::EntityKind::Node))
            .map(|(id, (_, v))| (id.clone(), *v))
            .collect();
        for (id, version) in snapshot {
            match self.naming.call(
                &self.cfg.node_id,
                &self.cfg.keys,
                NamingOp::GetConfig {
                    target: ConfigTarget::Entity(id.clone()),
                    cached_version: Some(version),
                },
            ) {
                Ok(NamingReply::UpToDate) => {}
                Ok(NamingReply::Entity { descriptor, version }) => {
                    self.entities.lock().unwrap().insert(id, (descriptor, version));
                }
                _ => {}
            }
        }
    }

    pub(crate) fn machine_endpoints_of(&self, node: &EntityId) -> Vec<Endpoint> {
        let Ok(EntityDescriptor::Node(node_desc)) = self.resolve_entity(node) else {
            return Vec::new();
        };
        let mut endpoints = Vec::new();
        for machine_id in &node_desc.machine_ids {
            if let Ok(EntityDescriptor::Machine(m)) = self.resolve_entity(machine_id) {
                endpoints.push(Endpoint::with_addr(m.id.name(), m.address.clone()));
            }
        }
        endpoints
    }

    // ------------------------------------------------------------------
    // Request dispatch
    // ------------------------------------------------------------------

    fn dispatch(self: &Arc<Self>, payload: &[u8]) -> Vec<u8> {
        if !self.is_alive() {
            return ClientOutcome(Err(ClientError::Unavailable("daemon stopped".into()))).encode();
        }
        match payload.get(1) {
            Some(&CLIENT_REQUEST_TAG) => {
                let outcome = match ClientRequest::decode(payload) {
                    Ok(request) => self.handle_client(request),
                    Err(e) => Err(ClientError::BadRequest(e.to_string())),
                };
                ClientOutcome(outcome).encode()
            }
            Some(&PEER_REQUEST_TAG) => self.handle_peer_raw(payload),
            _ => ClientOutcome(Err(ClientError::BadRequest("unrecognized request tag".into()))).encode(),
        }
    }

    fn handle_client(self: &Arc<Self>, request: ClientRequest) -> Result<ClientReply, ClientError> {
        match request {
            ClientRequest::Op { op, auth } => {
                let start = self.now();
                self.verify_client(&op, &auth)?;
                self.handle_client_op(&op, &auth.caller, start)
            }
            ClientRequest::NamingRelay { sealed } => {
                let response = self
                    .naming
                    .relay(&sealed)
                    .map_err(|e| ClientError::Unavailable(e.to_string()))?;
                Ok(ClientReply::NamingResponse(response))
            }
            ClientRequest::ConfigHint { keygroup } => {
                match self.refresh_keygroup(&keygroup) {
                    Ok(_) | Err(ClientError::Forbidden) => {}
                    Err(e) => log::debug!("{}: hint refresh failed: {e}", self.cfg.machine_id),
                }
                Ok(ClientReply::HintAck)
            }
        }
    }

    fn verify_client(
        &self,
        op: &ClientOp,
        auth: &crate::naming::protocol::AuthContext,
    ) -> Result<(), ClientError> {
        self.clock.charge_ms(self.cfg.params.costs.verify_ms);
        if auth.caller.kind() != crate::model::EntityKind::Client {
            return Err(ClientError::Forbidden);
        }
        let descriptor = self.resolve_entity(&auth.caller)?;
        crypto::verify(descriptor.public_key(), &op.signing_bytes(), &auth.proof)
            .map_err(|_| ClientError::Forbidden)
    }

    fn handle_client_op(
        self: &Arc<Self>,
        op: &ClientOp,
        caller: &EntityId,
        start: u64,
    ) -> Result<ClientReply, ClientError> {
        let kg = op.keygroup().clone();
        match op {
            ClientOp::Put {
                record_key, fields, ..
            } => self.handle_write(&kg, record_key, Some(fields), caller, start),
            ClientOp::Delete { record_key, .. } => self.handle_write(&kg, record_key, None, caller, start),
            ClientOp::Get { record_key, .. } => self.handle_get(&kg, record_key, caller, start),
            ClientOp::TriggerSubscribe { consumer, .. } => {
                let cached = self.ensure_config(&kg)?;
                if !cached.metadata.is_trigger(&self.cfg.node_id) {
                    return Err(ClientError::NotTriggerNode);
                }
                if !cached.metadata.is_authorized_client(caller) {
                    return Err(ClientError::Forbidden);
                }
                let consumer = format!("{}/{}", caller.name(), consumer);
                self.connector
                    .trigger_register_consumer(&kg, &consumer)
                    .map_err(|e| ClientError::StorageFailure(e.to_string()))?;
                Ok(ClientReply::HintAck)
            }
            ClientOp::TriggerPoll { consumer, max, .. } => {
                let cached = self.ensure_config(&kg)?;
                if !cached.metadata.is_trigger(&self.cfg.node_id) {
                    return Err(ClientError::NotTriggerNode);
                }
                if !cached.metadata.is_authorized_client(caller) {
                    return Err(ClientError::Forbidden);
                }
                let consumer = format!("{}/{}", caller.name(), consumer);
                let records = self
                    .connector
                    .trigger_poll(&kg, &consumer, *max as usize)
                    .map_err(|e| ClientError::StorageFailure(e.to_string()))?;
                self.clock.charge_ms(self.cfg.params.costs.seal_ms);
                let sealed = records
                    .iter()
                    .map(|r| crypto::seal_record(r, &cached.metadata.secret, self.entropy.as_ref()))
                    .collect();
                Ok(ClientReply::TriggerBatch(sealed))
            }
        }
    }

    /// Put and delete share the commit path: stamp, merge, seal, publish,
    /// then acknowledge. The ack goes out only after the publish call has
    /// returned, so a committed write is also a propagated one.
    fn handle_write(
        self: &Arc<Self>,
        kg: &KeygroupName,
        record_key: &str,
        fields: Option<&crate::model::SealedRecord>,
        caller: &EntityId,
        start: u64,
    ) -> Result<ClientReply, ClientError> {
        let cached = self.ensure_config(kg)?;
        if !cached.metadata.is_replica(&self.cfg.node_id) {
            return Err(ClientError::NotReplicaNode);
        }
        if !cached.metadata.is_authorized_client(caller) {
            return Err(ClientError::Forbidden);
        }

        let deleted = fields.is_none();
        let field_map = match fields {
            Some(sealed) => {
                self.clock.charge_ms(self.cfg.params.costs.open_ms);
                let secrets = cached.usable_secrets(self.now());
                match crypto::open_fields(sealed, secrets.iter().copied()) {
                    Ok(map) => map,
                    Err(crypto::CryptoError::UnknownSecretVersion(v)) => {
                        // The client may hold a newer secret than our cache.
                        let cached = self.refresh_keygroup(kg)?;
                        let secrets = cached.usable_secrets(self.now());
                        crypto::open_fields(sealed, secrets.iter().copied())
                            .map_err(|_| ClientError::UnknownSecretVersion(v))?
                    }
                    Err(crypto::CryptoError::AuthenticationFailed) => {
                        return Err(ClientError::BadRequest("field payload failed authentication".into()))
                    }
                    Err(e) => return Err(ClientError::BadRequest(e.to_string())),
                }
            }
            None => BTreeMap::new(),
        };

        // Timestamps are assigned here, by the ingesting node; clients may
        // lack clocks. Strictly above the stored timestamp so a node's own
        // writes always supersede what it already has.
        let storage_start = self.now();
        self.clock.charge_ms(self.cfg.params.costs.storage_get_ms);
        let current_ts = self
            .connector
            .get_record(kg, record_key)
            .map_err(|e| ClientError::StorageFailure(e.to_string()))?
            .map(|s| s.record.update_timestamp)
            .unwrap_or(0);
        let ts = self.now().max(current_ts + 1);

        let record = if deleted {
            DataRecord::tombstone(kg.clone(), record_key, ts, self.cfg.node_id.clone())
        } else {
            DataRecord::new(kg.clone(), record_key, field_map, ts, self.cfg.node_id.clone())
        }
        .map_err(|e| ClientError::BadRequest(e.to_string()))?;

        self.clock.charge_ms(if deleted {
            self.cfg.params.costs.storage_delete_ms
        } else {
            self.cfg.params.costs.storage_put_ms
        });
        let merged = self
            .connector
            .merge_record(kg, &record, self.now())
            .map_err(|e| ClientError::StorageFailure(e.to_string()))?;
        let storage_end = self.now();

        if cached.metadata.is_trigger(&self.cfg.node_id) {
            let _ = self.connector.trigger_append(kg, &merged.stored.record);
        }

        self.clock.charge_ms(self.cfg.params.costs.seal_ms);
        let sealed = crypto::seal_record(&merged.stored.record, &cached.metadata.secret, self.entropy.as_ref());
        let counter = self
            .connector
            .allocate_counter(kg, record_key, self.cfg.params.sender_buffer_capacity)
            .map_err(|e| ClientError::StorageFailure(e.to_string()))?;
        let update = crate::model::UpdateMessage {
            sender_node: self.cfg.node_id.clone(),
            keygroup: kg.clone(),
            counter,
            payload: sealed,
            secret_version: cached.metadata.secret.version,
        };
        self.clock.charge_ms(self.cfg.params.costs.publish_ms);
        self.bus
            .publish(&self.cfg.endpoint, &Topic::for_keygroup(kg), &update.encode());

        let end = self.now();
        self.emit(DaemonEvent::WriteCommitted {
            node: self.cfg.node_id.clone(),
            machine: self.cfg.machine_id.clone(),
            keygroup: kg.clone(),
            record_key: record_key.to_string(),
            counter,
            deleted,
            commit_ms: end,
        });
        self.emit(DaemonEvent::ClientOpServed {
            node: self.cfg.node_id.clone(),
            machine: self.cfg.machine_id.clone(),
            keygroup: kg.clone(),
            op: if deleted { ClientOpKind::Delete } else { ClientOpKind::Put },
            start_ms: start,
            storage_start_ms: storage_start,
            storage_end_ms: storage_end,
            end_ms: end,
            ok: true,
        });
        Ok(ClientReply::WriteAck {
            timestamp: ts,
            counter,
        })
    }

    fn handle_get(
        self: &Arc<Self>,
        kg: &KeygroupName,
        record_key: &str,
        caller: &EntityId,
        start: u64,
    ) -> Result<ClientReply, ClientError> {
        let cached = self.ensure_config(kg)?;
        if !cached.metadata.is_member(&self.cfg.node_id) {
            return Err(ClientError::Forbidden);
        }
        if !cached.metadata.is_authorized_client(caller) {
            return Err(ClientError::Forbidden);
        }
        let ttl = cached.metadata.ttl_for(&self.cfg.node_id).unwrap_or(Ttl::Disabled);

        let storage_start = self.now();
        self.clock.charge_ms(self.cfg.params.costs.storage_get_ms);
        let stored = self
            .connector
            .get_record(kg, record_key)
            .map_err(|e| ClientError::StorageFailure(e.to_string()))?;
        let storage_end = self.now();

        let visible = get_visible(stored, ttl, self.now()).filter(|r| !r.deleted);
        let reply = match visible {
            Some(record) => {
                self.clock.charge_ms(self.cfg.params.costs.seal_ms);
                Some(crypto::seal_record(&record, &cached.metadata.secret, self.entropy.as_ref()))
            }
            None => None,
        };
        let end = self.now();
        self.emit(DaemonEvent::ClientOpServed {
            node: self.cfg.node_id.clone(),
            machine: self.cfg.machine_id.clone(),
            keygroup: kg.clone(),
            op: ClientOpKind::Get,
            start_ms: start,
            storage_start_ms: storage_start,
            storage_end_ms: storage_end,
            end_ms: end,
            ok: true,
        });
        Ok(ClientReply::Record(reply))
    }

    // ------------------------------------------------------------------
    // Introspection for harnesses and tests
    // ------------------------------------------------------------------

    /// The node's current record map for a keygroup (record contents only;
    /// local write times differ across nodes by design).
    pub fn record_map(&self, kg: &KeygroupName) -> BTreeMap<String, DataRecord> {
        self.connector
            .all_records(kg)
            .map(|records| {
                records
                    .into_iter()
                    .map(|s| (s.record.record_key.clone(), s.record))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn cursors(&self, kg: &KeygroupName) -> BTreeMap<EntityId, crate::storage::ReceiverCursor> {
        self.connector.cursors(kg).unwrap_or_default()
    }

    pub fn cached_config(&self, kg: &KeygroupName) -> Option<CachedKeygroup> {
        self.connector.get_cached_config(kg).ok().flatten()
    }

    pub fn subscribed_keygroups(&self) -> BTreeSet<KeygroupName> {
        self.subs.lock().unwrap().keys().cloned().collect()
    }

    pub fn responsibility(&self) -> BTreeMap<EntityId, EntityId> {
        self.connector.load_responsibility().unwrap_or_default()
    }

    /// Registers a local trigger consumer (in-process integrations).
    pub fn trigger_register_local(&self, kg: &KeygroupName, consumer: &str) -> Result<(), ClientError> {
        let cached = self
            .connector
            .get_cached_config(kg)
            .ok()
            .flatten()
            .ok_or(ClientError::UnknownKeygroup)?;
        if !cached.metadata.is_trigger(&self.cfg.node_id) {
            return Err(ClientError::NotTriggerNode);
        }
        self.connector
            .trigger_register_consumer(kg, consumer)
            .map_err(|e| ClientError::StorageFailure(e.to_string()))
    }

    pub fn trigger_poll_local(&self, kg: &KeygroupName, consumer: &str, max: usize) -> Vec<DataRecord> {
        self.connector.trigger_poll(kg, consumer, max).unwrap_or_default()
    }
}

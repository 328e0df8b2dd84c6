//! Builds whole fog topologies in one process on virtual time.
//!
//! `Cluster::build` bootstraps the naming service, registers every node,
//! machine and client from the spec, starts one daemon per machine over
//! the node's shared connector, creates all keygroups through client
//! sessions, and verifies that every cross-node subscription is in place
//! before returning. Faults activate separately so setup is always clean.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use fogrep_core::client::{Channel, ClientIdentity, ClientSession};
use fogrep_core::crypto::{IdentityKeys, PublicKeySet, SeededEntropy};
use fogrep_core::daemon::events::{DaemonEvent, EventSink};
use fogrep_core::daemon::{Daemon, DaemonConfig};
use fogrep_core::model::{
    ClientDescriptor, DataRecord, EntityId, GeoPoint, KeygroupName, MachineDescriptor, NodeDescriptor, Ttl,
};
use fogrep_core::naming::client::{NamingAccess, NamingClient};
use fogrep_core::naming::journal::MemJournal;
use fogrep_core::naming::protocol::{EntityDescriptor, NamingOp};
use fogrep_core::naming::server::NamingService;
use fogrep_core::storage::file::FileConnector;
use fogrep_core::storage::memory::MemoryConnector;
use fogrep_core::storage::{StorageConnector, StoredRecord};
use fogrep_core::transport::sim::SimNet;
use fogrep_core::transport::{Bus, Clock, Endpoint};

use crate::spec::{ClusterSpec, ConnectorKind, SpecError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("cluster build failed: {0}")]
    Build(String),
    #[error("scenario assertion failed: {0}")]
    ScenarioAssertionFailed(String),
    #[error("staleness needs a keygroup with at least two replicas")]
    InsufficientReplicas,
    #[error("report i/o failure: {0}")]
    Io(String),
    #[error("report is empty; refusing to emit an empty file")]
    EmptyReport,
    #[error("{0}")]
    Other(String),
}

impl From<fogrep_core::client::SessionError> for HarnessError {
    fn from(e: fogrep_core::client::SessionError) -> Self {
        HarnessError::Other(e.to_string())
    }
}

/// Per-receiver loss accounting for one (sender, keygroup) stream: every
/// published counter is exactly one of applied, pending, or lost.
#[derive(Debug, Clone, PartialEq)]
pub struct LossLine {
    pub keygroup: String,
    pub receiver: String,
    pub sender: String,
    pub latest_sent: u64,
    pub applied: u64,
    pub pending: u64,
    pub lost: u64,
    pub lost_counters: Vec<u64>,
    /// True when the receiver has accounted for the sender's full counter
    /// range (applied + pending + lost == latest_sent).
    pub accounted: bool,
}

pub struct Cluster {
    pub spec: ClusterSpec,
    pub net: Arc<SimNet>,
    pub entropy: Arc<SeededEntropy>,
    pub naming: Arc<NamingService>,
    pub naming_public: PublicKeySet,
    pub admin_id: EntityId,
    pub admin_keys: Arc<IdentityKeys>,
    pub client_keys: BTreeMap<String, Arc<IdentityKeys>>,
    pub daemons: BTreeMap<String, Arc<Daemon>>,
    pub connectors: BTreeMap<String, Arc<dyn StorageConnector>>,
    events: Arc<Mutex<Vec<DaemonEvent>>>,
    session_seq: AtomicU64,
    _temp_dirs: Vec<tempfile::TempDir>,
}

impl Cluster {
    pub fn build(spec: ClusterSpec) -> Result<Cluster, HarnessError> {
        spec.validate()?;
        let net = SimNet::new(spec.seed);
        let entropy = Arc::new(SeededEntropy::new(spec.seed));
        let naming_keys = IdentityKeys::generate(entropy.as_ref());
        let naming = NamingService::open(Box::new(MemJournal::new()), naming_keys, entropy.clone())
            .map_err(|e| HarnessError::Build(e.to_string()))?;
        let naming_public = naming.public_key();
        naming
            .serve(net.as_ref(), &NamingService::endpoint())
            .map_err(|e| HarnessError::Build(e.to_string()))?;

        let admin_id = EntityId::client("cluster-admin").map_err(|e| HarnessError::Build(e.to_string()))?;
        let admin_keys = Arc::new(IdentityKeys::generate(entropy.as_ref()));
        let admin_ep = Endpoint::named("cluster-admin");
        net.register_endpoint(&admin_ep, Arc::new(|_, _| Vec::new()))
            .map_err(|e| HarnessError::Build(e.to_string()))?;
        let admin_naming = NamingClient::new(
            NamingAccess {
                sender: admin_id.clone(),
                keys: admin_keys.clone(),
                naming_public: naming_public.clone(),
                entropy: entropy.clone(),
            },
            net.clone(),
            admin_ep,
            NamingService::endpoint(),
            1_000,
        );

        // Bootstrap with the first node plus the admin client, then
        // register everything else through authenticated calls.
        let first = &spec.nodes[0];
        let mut node_keys: BTreeMap<String, Arc<IdentityKeys>> = BTreeMap::new();
        let first_keys = Arc::new(IdentityKeys::generate(entropy.as_ref()));
        admin_naming
            .call(
                &admin_id,
                &admin_keys,
                NamingOp::Bootstrap {
                    node: NodeDescriptor {
                        id: EntityId::node(&first.name).map_err(|e| HarnessError::Build(e.to_string()))?,
                        location: GeoPoint::new(first.location[0], first.location[1])
                            .map_err(|e| HarnessError::Build(e.to_string()))?,
                        machine_ids: vec![],
                        public_key: first_keys.public().to_bytes(),
                    },
                    client: ClientDescriptor {
                        id: admin_id.clone(),
                        public_key: admin_keys.public().to_bytes(),
                    },
                },
            )
            .map_err(|e| HarnessError::Build(format!("bootstrap: {e}")))?;
        node_keys.insert(first.name.clone(), first_keys);

        for node in spec.nodes.iter().skip(1) {
            let keys = Arc::new(IdentityKeys::generate(entropy.as_ref()));
            admin_naming
                .call(
                    &admin_id,
                    &admin_keys,
                    NamingOp::Register {
                        descriptor: EntityDescriptor::Node(NodeDescriptor {
                            id: EntityId::node(&node.name).map_err(|e| HarnessError::Build(e.to_string()))?,
                            location: GeoPoint::new(node.location[0], node.location[1])
                                .map_err(|e| HarnessError::Build(e.to_string()))?,
                            machine_ids: vec![],
                            public_key: keys.public().to_bytes(),
                        }),
                    },
                )
                .map_err(|e| HarnessError::Build(format!("register node {}: {e}", node.name)))?;
            node_keys.insert(node.name.clone(), keys);
        }

        let mut machine_keys: BTreeMap<String, Arc<IdentityKeys>> = BTreeMap::new();
        for node in &spec.nodes {
            let node_id = EntityId::node(&node.name).unwrap();
            for machine_name in spec.machine_names(node) {
                let keys = Arc::new(IdentityKeys::generate(entropy.as_ref()));
                admin_naming
                    .call(
                        &admin_id,
                        &admin_keys,
                        NamingOp::Register {
                            descriptor: EntityDescriptor::Machine(MachineDescriptor {
                                id: EntityId::machine(&machine_name)
                                    .map_err(|e| HarnessError::Build(e.to_string()))?,
                                node_id: node_id.clone(),
                                address: String::new(),
                                public_key: keys.public().to_bytes(),
                            }),
                        },
                    )
                    .map_err(|e| HarnessError::Build(format!("register machine {machine_name}: {e}")))?;
                machine_keys.insert(machine_name, keys);
            }
        }

        let mut client_keys: BTreeMap<String, Arc<IdentityKeys>> = BTreeMap::new();
        for client in &spec.clients {
            let keys = Arc::new(IdentityKeys::generate(entropy.as_ref()));
            admin_naming
                .call(
                    &admin_id,
                    &admin_keys,
                    NamingOp::Register {
                        descriptor: EntityDescriptor::Client(ClientDescriptor {
                            id: EntityId::client(client).map_err(|e| HarnessError::Build(e.to_string()))?,
                            public_key: keys.public().to_bytes(),
                        }),
                    },
                )
                .map_err(|e| HarnessError::Build(format!("register client {client}: {e}")))?;
            client_keys.insert(client.clone(), keys);
        }

        // One shared connector per node, one daemon per machine.
        let events: Arc<Mutex<Vec<DaemonEvent>>> = Arc::new(Mutex::new(Vec::new()));
        let sink: EventSink = {
            let events = events.clone();
            Arc::new(move |event| events.lock().unwrap().push(event.clone()))
        };
        let mut temp_dirs = Vec::new();
        let mut connectors: BTreeMap<String, Arc<dyn StorageConnector>> = BTreeMap::new();
        let mut daemons: BTreeMap<String, Arc<Daemon>> = BTreeMap::new();
        let params = spec.daemon_params();
        for node in &spec.nodes {
            let connector: Arc<dyn StorageConnector> = match node.connector {
                ConnectorKind::Memory => Arc::new(MemoryConnector::new()),
                ConnectorKind::File => {
                    let dir = tempfile::tempdir().map_err(|e| HarnessError::Build(e.to_string()))?;
                    let connector =
                        FileConnector::open(dir.path()).map_err(|e| HarnessError::Build(e.to_string()))?;
                    temp_dirs.push(dir);
                    Arc::new(connector)
                }
            };
            connectors.insert(node.name.clone(), connector.clone());
            let node_id = EntityId::node(&node.name).unwrap();
            for machine_name in spec.machine_names(node) {
                let daemon = Daemon::start(
                    DaemonConfig {
                        node_id: node_id.clone(),
                        machine_id: EntityId::machine(&machine_name).unwrap(),
                        endpoint: Endpoint::named(&machine_name),
                        keys: machine_keys[&machine_name].clone(),
                        naming_endpoint: NamingService::endpoint(),
                        naming_public: naming_public.clone(),
                        params: params.clone(),
                    },
                    net.clone(),
                    net.clone(),
                    net.clone(),
                    connector.clone(),
                    entropy.clone(),
                    sink.clone(),
                )
                .map_err(|e| HarnessError::Build(format!("daemon {machine_name}: {e}")))?;
                daemons.insert(machine_name, daemon);
            }
        }

        let cluster = Cluster {
            spec,
            net,
            entropy,
            naming,
            naming_public,
            admin_id,
            admin_keys,
            client_keys,
            daemons,
            connectors,
            events,
            session_seq: AtomicU64::new(0),
            _temp_dirs: temp_dirs,
        };

        cluster.create_keygroups()?;
        cluster.verify_subscriptions()?;
        Ok(cluster)
    }

    fn create_keygroups(&self) -> Result<(), HarnessError> {
        for kg_spec in &self.spec.keygroups {
            let kg = KeygroupName::parse(&kg_spec.name).unwrap();
            let creator = kg_spec.clients.first().map(|s| s.as_str()).unwrap_or("admin");
            let target = self.first_machine(&kg_spec.replicas[0].node);
            let session = self.new_session(creator, &target)?;
            let replicas: Vec<(EntityId, Ttl)> = kg_spec
                .replicas
                .iter()
                .map(|r| Ok((EntityId::node(&r.node).unwrap(), r.ttl.to_ttl()?)))
                .collect::<Result<_, SpecError>>()?;
            let triggers: Vec<EntityId> = kg_spec.triggers.iter().map(|n| EntityId::node(n).unwrap()).collect();
            let clients: Vec<EntityId> = kg_spec.clients.iter().map(|c| EntityId::client(c).unwrap()).collect();
            session
                .setup_keygroup(&kg, &replicas, &triggers, &clients)
                .map_err(|e| HarnessError::Build(format!("keygroup {}: {e}", kg_spec.name)))?;
        }
        Ok(())
    }

    /// Waits until every member node of every keygroup holds the config
    /// and the cross-subscriptions exist, with responsibility covering
    /// every remote sender.
    fn verify_subscriptions(&self) -> Result<(), HarnessError> {
        let deadline = self.net.now_ms() + 30_000;
        'outer: loop {
            self.net.run_for(250);
            for kg_spec in &self.spec.keygroups {
                let kg = KeygroupName::parse(&kg_spec.name).unwrap();
                let mut members: Vec<String> = kg_spec.replicas.iter().map(|r| r.node.clone()).collect();
                members.extend(kg_spec.triggers.iter().cloned());
                members.sort();
                members.dedup();
                for member in &members {
                    let node_spec = self.spec.node(member).unwrap();
                    let machines = self.spec.machine_names(node_spec);
                    let configured = machines
                        .iter()
                        .any(|m| self.daemons[m].cached_config(&kg).is_some());
                    if !configured {
                        if self.net.now_ms() > deadline {
                            return Err(HarnessError::Build(format!(
                                "node {member} never obtained config for {kg}"
                            )));
                        }
                        continue 'outer;
                    }
                    let senders: Vec<String> = kg_spec
                        .replicas
                        .iter()
                        .map(|r| r.node.clone())
                        .filter(|n| n != member)
                        .collect();
                    if senders.is_empty() {
                        continue;
                    }
                    // Responsibility coverage: every sender owned by some
                    // machine, and that machine subscribed to the topic.
                    let resp = self.connectors[member].load_responsibility().unwrap_or_default();
                    for sender in &senders {
                        let sender_id = EntityId::node(sender).unwrap();
                        let covered = resp.get(&sender_id).map(|machine| {
                            let name = machine.name().to_string();
                            self.daemons
                                .get(&name)
                                .map(|d| d.subscribed_keygroups().contains(&kg))
                                .unwrap_or(false)
                        });
                        if covered != Some(true) {
                            if self.net.now_ms() > deadline {
                                return Err(HarnessError::Build(format!(
                                    "no subscribed responsible machine on {member} for sender {sender} of {kg}"
                                )));
                            }
                            continue 'outer;
                        }
                    }
                }
            }
            return Ok(());
        }
    }

    /// Installs the spec's fault profile; partition windows are relative
    /// to this instant.
    pub fn enable_faults(&self) {
        if let Some(profile) = self.spec.fault_profile(self.net.now_ms()) {
            self.net.set_fault_profile(Some(profile));
        }
    }

    pub fn disable_faults(&self) {
        self.net.set_fault_profile(None);
    }

    pub fn run_for(&self, ms: u64) {
        self.net.run_for(ms);
    }

    pub fn now(&self) -> u64 {
        self.net.now_ms()
    }

    pub fn first_machine(&self, node: &str) -> String {
        format!("{node}-m1")
    }

    pub fn daemon(&self, machine: &str) -> &Arc<Daemon> {
        &self.daemons[machine]
    }

    /// Crashes one machine: its daemon stops serving and heartbeating.
    pub fn crash_machine(&self, machine: &str) {
        if let Some(daemon) = self.daemons.get(machine) {
            daemon.shutdown();
        }
    }

    /// A fresh session for a registered client (or "admin"), targeting a
    /// machine endpoint. Each session gets its own bus endpoint.
    pub fn new_session(&self, client: &str, target_machine: &str) -> Result<ClientSession, HarnessError> {
        self.new_session_with_timeout(client, target_machine, 1_000)
    }

    pub fn new_session_with_timeout(
        &self,
        client: &str,
        target_machine: &str,
        timeout_ms: u64,
    ) -> Result<ClientSession, HarnessError> {
        let (id, keys) = if client == "admin" {
            (self.admin_id.clone(), self.admin_keys.clone())
        } else {
            let keys = self
                .client_keys
                .get(client)
                .ok_or_else(|| HarnessError::Other(format!("unknown client {client}")))?
                .clone();
            (EntityId::client(client).unwrap(), keys)
        };
        let seq = self.session_seq.fetch_add(1, Ordering::SeqCst);
        let endpoint = Endpoint::named(format!("session-{client}-{seq}"));
        self.net
            .register_endpoint(&endpoint, Arc::new(|_, _| Vec::new()))
            .map_err(|e| HarnessError::Other(e.to_string()))?;
        Ok(ClientSession::new(
            ClientIdentity { id, keys },
            Channel::Bus {
                bus: self.net.clone(),
                endpoint,
            },
            Endpoint::named(target_machine),
            self.naming_public.clone(),
            self.entropy.clone(),
            timeout_ms,
        ))
    }

    pub fn events(&self) -> Vec<DaemonEvent> {
        self.events.lock().unwrap().clone()
    }

    /// Record maps per node for a keygroup, compared for convergence.
    pub fn record_maps(&self, kg: &KeygroupName) -> BTreeMap<String, BTreeMap<String, DataRecord>> {
        let mut maps = BTreeMap::new();
        for kg_spec in &self.spec.keygroups {
            if kg_spec.name != kg.rendered() {
                continue;
            }
            let mut members: Vec<String> = kg_spec.replicas.iter().map(|r| r.node.clone()).collect();
            members.extend(kg_spec.triggers.iter().cloned());
            members.sort();
            members.dedup();
            for member in members {
                let machine = self.first_machine(&member);
                maps.insert(member, self.daemons[&machine].record_map(kg));
            }
        }
        maps
    }

    pub fn stored_records(&self, node: &str, kg: &KeygroupName) -> Vec<StoredRecord> {
        self.connectors
            .get(node)
            .and_then(|c| c.all_records(kg).ok())
            .unwrap_or_default()
    }

    /// Loss accounting for one keygroup: one line per (receiver, sender).
    pub fn loss_accounting(&self, kg: &KeygroupName) -> Vec<LossLine> {
        let mut lines = Vec::new();
        let Some(kg_spec) = self.spec.keygroups.iter().find(|k| k.name == kg.rendered()) else {
            return lines;
        };
        let mut members: Vec<String> = kg_spec.replicas.iter().map(|r| r.node.clone()).collect();
        members.extend(kg_spec.triggers.iter().cloned());
        members.sort();
        members.dedup();
        let senders: Vec<String> = kg_spec.replicas.iter().map(|r| r.node.clone()).collect();
        for receiver in &members {
            for sender in &senders {
                if sender == receiver {
                    continue;
                }
                let latest = self
                    .connectors
                    .get(sender)
                    .and_then(|c| c.latest_counter(kg).ok())
                    .unwrap_or(0);
                let cursor = self
                    .connectors
                    .get(receiver)
                    .and_then(|c| c.load_cursor(&EntityId::node(sender).unwrap(), kg).ok())
                    .unwrap_or_default();
                let applied = cursor.applied_counters().len() as u64;
                let pending = cursor.pending.len() as u64;
                let lost = cursor.lost.len() as u64;
                lines.push(LossLine {
                    keygroup: kg.rendered(),
                    receiver: receiver.clone(),
                    sender: sender.clone(),
                    latest_sent: latest,
                    applied,
                    pending,
                    lost,
                    lost_counters: cursor.lost.iter().copied().collect(),
                    accounted: cursor.highest_applied == latest && applied + pending + lost == latest,
                });
            }
        }
        lines
    }

    pub fn total_lost(&self, kg: &KeygroupName) -> u64 {
        self.loss_accounting(kg).iter().map(|l| l.lost).sum()
    }

    /// Advances virtual time in steps until `done` holds or `max_ms`
    /// elapses; returns whether the predicate was met.
    pub fn settle(&self, step_ms: u64, max_ms: u64, mut done: impl FnMut(&Cluster) -> bool) -> bool {
        let deadline = self.now() + max_ms;
        loop {
            if done(self) {
                return true;
            }
            if self.now() >= deadline {
                return false;
            }
            self.run_for(step_ms.min(deadline - self.now()));
        }
    }

    /// True when all member record maps of the keygroup are identical and
    /// nothing is pending or unaccounted.
    pub fn converged(&self, kg: &KeygroupName) -> bool {
        let maps = self.record_maps(kg);
        let mut values = maps.values();
        let Some(reference) = values.next() else { return true };
        if !values.all(|m| m == reference) {
            return false;
        }
        self.loss_accounting(kg)
            .iter()
            .all(|line| line.accounted && line.pending == 0)
    }
}

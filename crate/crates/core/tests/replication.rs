//! Daemon integration tests on the in-process bus: the client write path,
//! counter sequencing, gap detection and recovery, reordering, duplicate
//! suppression and permanent-loss accounting. A scripted peer endpoint
//! plays the role of a remote sender node so every counter arrival is
//! under test control.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use fogrep_core::client::{Channel, ClientIdentity, ClientSession};
use fogrep_core::crypto::{self, IdentityKeys, PublicKeySet, SeededEntropy};
use fogrep_core::daemon::events::{DaemonEvent, EventSink, LossReason};
use fogrep_core::daemon::{Daemon, DaemonConfig, DaemonParams};
use fogrep_core::model::{
    ClientDescriptor, DataRecord, EntityId, GeoPoint, KeygroupName, MachineDescriptor, NodeDescriptor,
    SecretVersion, Ttl, UpdateMessage,
};
use fogrep_core::naming::client::{NamingAccess, NamingClient};
use fogrep_core::naming::journal::MemJournal;
use fogrep_core::naming::protocol::{EntityDescriptor, NamingOp};
use fogrep_core::naming::server::NamingService;
use fogrep_core::proto::{ClientError, PeerReply, PeerRequest, RecoveryItem};
use fogrep_core::storage::memory::MemoryConnector;
use fogrep_core::transport::sim::SimNet;
use fogrep_core::transport::{Bus, Clock, Endpoint, ReqHandler, Topic};
use fogrep_core::wire::{WireDecode, WireEncode};

struct World {
    net: Arc<SimNet>,
    entropy: Arc<SeededEntropy>,
    naming_public: PublicKeySet,
    admin_id: EntityId,
    admin_keys: Arc<IdentityKeys>,
    admin_naming: NamingClient,
    daemons: BTreeMap<String, Arc<Daemon>>,
    events: Arc<Mutex<Vec<DaemonEvent>>>,
    _naming: Arc<NamingService>,
}

fn collector(log: &Arc<Mutex<Vec<DaemonEvent>>>) -> EventSink {
    let log = log.clone();
    Arc::new(move |event| log.lock().unwrap().push(event.clone()))
}

impl World {
    /// One bootstrap node `n0`, an admin client, plus a daemon-backed
    /// node (one machine each) per listed name.
    fn new(seed: u64, nodes: &[&str]) -> World {
        let net = SimNet::new(seed);
        let entropy = Arc::new(SeededEntropy::new(seed));
        let naming_keys = IdentityKeys::generate(entropy.as_ref());
        let naming = NamingService::open(Box::new(MemJournal::new()), naming_keys, entropy.clone()).unwrap();
        let naming_public = naming.public_key();
        naming.serve(net.as_ref(), &NamingService::endpoint()).unwrap();

        let admin_id = EntityId::client("admin").unwrap();
        let admin_keys = Arc::new(IdentityKeys::generate(entropy.as_ref()));
        let admin_ep = Endpoint::named("client-admin");
        net.register_endpoint(&admin_ep, Arc::new(|_, _| Vec::new())).unwrap();
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
            500,
        );

        let n0_keys = IdentityKeys::generate(entropy.as_ref());
        admin_naming
            .call(
                &admin_id,
                &admin_keys,
                NamingOp::Bootstrap {
                    node: NodeDescriptor {
                        id: EntityId::node("n0").unwrap(),
                        location: GeoPoint::new(0.0, 0.0).unwrap(),
                        machine_ids: vec![],
                        public_key: n0_keys.public().to_bytes(),
                    },
                    client: ClientDescriptor {
                        id: admin_id.clone(),
                        public_key: admin_keys.public().to_bytes(),
                    },
                },
            )
            .unwrap();

        let mut world = World {
            net,
            entropy,
            naming_public,
            admin_id,
            admin_keys,
            admin_naming,
            daemons: BTreeMap::new(),
            events: Arc::new(Mutex::new(Vec::new())),
            _naming: naming,
        };
        for name in nodes {
            world.add_daemon_node(name, DaemonParams::default());
        }
        world
    }

    fn register_node(&self, name: &str, keys: &IdentityKeys) -> EntityId {
        self.admin_naming
            .call(
                &self.admin_id,
                &self.admin_keys,
                NamingOp::Register {
                    descriptor: EntityDescriptor::Node(NodeDescriptor {
                        id: EntityId::node(name).unwrap(),
                        location: GeoPoint::new(10.0, 10.0).unwrap(),
                        machine_ids: vec![],
                        public_key: keys.public().to_bytes(),
                    }),
                },
            )
            .unwrap();
        EntityId::node(name).unwrap()
    }

    fn register_machine(&self, name: &str, node: &EntityId, keys: &IdentityKeys) -> EntityId {
        self.admin_naming
            .call(
                &self.admin_id,
                &self.admin_keys,
                NamingOp::Register {
                    descriptor: EntityDescriptor::Machine(MachineDescriptor {
                        id: EntityId::machine(name).unwrap(),
                        node_id: node.clone(),
                        address: String::new(),
                        public_key: keys.public().to_bytes(),
                    }),
                },
            )
            .unwrap();
        EntityId::machine(name).unwrap()
    }

    /// Registers a node with one machine and starts a daemon for it.
    fn add_daemon_node(&mut self, name: &str, params: DaemonParams) -> Arc<Daemon> {
        let node_keys = IdentityKeys::generate(self.entropy.as_ref());
        let node = self.register_node(name, &node_keys);
        let machine_name = format!("{name}-m1");
        let machine_keys = Arc::new(IdentityKeys::generate(self.entropy.as_ref()));
        let machine = self.register_machine(&machine_name, &node, &machine_keys);
        let connector = Arc::new(MemoryConnector::new());
        let daemon = Daemon::start(
            DaemonConfig {
                node_id: node,
                machine_id: machine,
                endpoint: Endpoint::named(&machine_name),
                keys: machine_keys,
                naming_endpoint: NamingService::endpoint(),
                naming_public: self.naming_public.clone(),
                params,
            },
            self.net.clone(),
            self.net.clone(),
            self.net.clone(),
            connector,
            self.entropy.clone(),
            collector(&self.events),
        )
        .unwrap();
        self.daemons.insert(machine_name, daemon.clone());
        daemon
    }

    fn session(&self, name: &str, target_machine: &str) -> ClientSession {
        let keys = Arc::new(IdentityKeys::generate(self.entropy.as_ref()));
        let id = EntityId::client(name).unwrap();
        self.admin_naming
            .call(
                &self.admin_id,
                &self.admin_keys,
                NamingOp::Register {
                    descriptor: EntityDescriptor::Client(ClientDescriptor {
                        id: id.clone(),
                        public_key: keys.public().to_bytes(),
                    }),
                },
            )
            .unwrap();
        let endpoint = Endpoint::named(format!("client-{name}"));
        self.net.register_endpoint(&endpoint, Arc::new(|_, _| Vec::new())).unwrap();
        ClientSession::new(
            ClientIdentity { id, keys },
            Channel::Bus {
                bus: self.net.clone(),
                endpoint,
            },
            Endpoint::named(target_machine),
            self.naming_public.clone(),
            self.entropy.clone(),
            500,
        )
    }

    fn admin_session(&self, target_machine: &str) -> ClientSession {
        let endpoint = Endpoint::named("client-admin-session");
        let _ = self.net.register_endpoint(&endpoint, Arc::new(|_, _| Vec::new()));
        ClientSession::new(
            ClientIdentity {
                id: self.admin_id.clone(),
                keys: self.admin_keys.clone(),
            },
            Channel::Bus {
                bus: self.net.clone(),
                endpoint,
            },
            Endpoint::named(target_machine),
            self.naming_public.clone(),
            self.entropy.clone(),
            500,
        )
    }

    fn events(&self) -> Vec<DaemonEvent> {
        self.events.lock().unwrap().clone()
    }
}

fn fields(value: &str) -> BTreeMap<String, Vec<u8>> {
    BTreeMap::from([("v".to_string(), value.as_bytes().to_vec())])
}

fn kg(name: &str) -> KeygroupName {
    KeygroupName::parse(name).unwrap()
}

#[test]
fn put_converges_to_both_replicas_and_counters_are_sequential() {
    let mut world = World::new(1, &[]);
    let edge = world.add_daemon_node("edge1", DaemonParams::default());
    let cloud = world.add_daemon_node("cloud1", DaemonParams::default());
    let session = world.admin_session("edge1-m1");

    let group = kg("app.user.temps");
    session
        .setup_keygroup(
            &group,
            &[
                (EntityId::node("edge1").unwrap(), Ttl::Disabled),
                (EntityId::node("cloud1").unwrap(), Ttl::Disabled),
            ],
            &[],
            &[],
        )
        .unwrap();
    world.net.run_for(2_000);
    assert!(cloud.subscribed_keygroups().contains(&group), "cloud subscribes to edge's updates");

    let (_, c1) = session.put(&group, "t1", fields("21.5")).unwrap();
    let (_, c2) = session.put(&group, "t2", fields("22.0")).unwrap();
    let (_, c3) = session.put(&group, "t3", fields("22.5")).unwrap();
    assert_eq!((c1, c2, c3), (1, 2, 3), "counters are strictly sequential");

    world.net.run_for(2_000);
    let edge_map = edge.record_map(&group);
    let cloud_map = cloud.record_map(&group);
    assert_eq!(edge_map.len(), 3);
    assert_eq!(edge_map, cloud_map, "replicas hold identical record maps");
}

#[test]
fn put_on_trigger_only_node_is_refused() {
    let mut world = World::new(2, &[]);
    let _edge = world.add_daemon_node("edge1", DaemonParams::default());
    let _tower = world.add_daemon_node("tower1", DaemonParams::default());
    let session = world.admin_session("tower1-m1");

    let group = kg("app.user.temps");
    session
        .setup_keygroup(
            &group,
            &[(EntityId::node("edge1").unwrap(), Ttl::Disabled)],
            &[EntityId::node("tower1").unwrap()],
            &[],
        )
        .unwrap();
    world.net.run_for(2_000);

    let err = session.put(&group, "t1", fields("x")).unwrap_err();
    match err {
        fogrep_core::client::SessionError::Client(ClientError::NotReplicaNode) => {}
        other => panic!("expected NotReplicaNode, got {other}"),
    }
}

#[test]
fn get_covers_local_put_ttl_expiry_and_delete() {
    let mut world = World::new(3, &[]);
    let edge = world.add_daemon_node("edge1", DaemonParams::default());
    let session = world.admin_session("edge1-m1");

    let group = kg("app.user.buffer");
    session
        .setup_keygroup(
            &group,
            &[(EntityId::node("edge1").unwrap(), Ttl::Millis(1_000))],
            &[],
            &[],
        )
        .unwrap();
    world.net.run_for(500);

    session.put(&group, "t1", fields("21.5")).unwrap();
    let got = session.get(&group, "t1").unwrap().expect("read-your-write");
    assert_eq!(got.fields["v"], b"21.5");

    // Expiry: past the TTL the record is gone, lazily and by sweep.
    world.net.run_for(2_000);
    assert!(session.get(&group, "t1").unwrap().is_none(), "expired record is absent");
    assert!(edge.record_map(&group).is_empty(), "sweep removed it");

    // Delete: tombstone locally visible as absent.
    session.put(&group, "t2", fields("x")).unwrap();
    session.delete(&group, "t2").unwrap();
    assert!(session.get(&group, "t2").unwrap().is_none());
    let map = edge.record_map(&group);
    assert!(map["t2"].deleted, "tombstone retained for replication");
}

#[test]
fn delete_of_never_existing_key_is_idempotent() {
    let mut world = World::new(4, &[]);
    world.add_daemon_node("edge1", DaemonParams::default());
    let session = world.admin_session("edge1-m1");
    let group = kg("app.user.temps");
    session
        .setup_keygroup(&group, &[(EntityId::node("edge1").unwrap(), Ttl::Disabled)], &[], &[])
        .unwrap();
    world.net.run_for(500);
    let (_, counter) = session.delete(&group, "ghost").unwrap();
    assert_eq!(counter, 1, "tombstone published like any update");
}

#[test]
fn delete_replicates_to_remote_replica() {
    let mut world = World::new(5, &[]);
    let _edge = world.add_daemon_node("edge1", DaemonParams::default());
    let cloud = world.add_daemon_node("cloud1", DaemonParams::default());
    let session = world.admin_session("edge1-m1");
    let group = kg("app.user.temps");
    session
        .setup_keygroup(
            &group,
            &[
                (EntityId::node("edge1").unwrap(), Ttl::Disabled),
                (EntityId::node("cloud1").unwrap(), Ttl::Disabled),
            ],
            &[],
            &[],
        )
        .unwrap();
    world.net.run_for(2_000);

    session.put(&group, "t1", fields("x")).unwrap();
    world.net.run_for(1_000);
    assert!(!cloud.record_map(&group)["t1"].deleted);

    session.delete(&group, "t1").unwrap();
    world.net.run_for(1_000);
    // Reference executor final state: the tombstone wins everywhere.
    assert!(cloud.record_map(&group)["t1"].deleted);
    let reader = world.admin_session("cloud1-m1");
    assert!(reader.get(&group, "t1").unwrap().is_none(), "remote get sees absence");
}

/// Fixture with one real daemon (receiver) and one scripted fake peer
/// node acting as the remote sender, so the test controls exactly which
/// counters arrive and what recovery returns.
struct ScriptedSender {
    world: World,
    receiver: Arc<Daemon>,
    group: KeygroupName,
    secret: SecretVersion,
    ghost_node: EntityId,
    ghost_ep: Endpoint,
    recover_calls: Arc<AtomicUsize>,
    buffered: Arc<Mutex<BTreeMap<u64, DataRecord>>>,
}

impl ScriptedSender {
    fn new(seed: u64) -> Self {
        let mut world = World::new(seed, &[]);
        let receiver = world.add_daemon_node("edge1", DaemonParams {
            // Slow probe so tests control recovery timing precisely.
            probe_period_ms: 60_000,
            ..DaemonParams::default()
        });

        // The ghost node exists in the registry with one machine whose
        // endpoint the test scripts.
        let ghost_keys = IdentityKeys::generate(world.entropy.as_ref());
        let ghost_node = world.register_node("ghost", &ghost_keys);
        let ghost_mkeys = IdentityKeys::generate(world.entropy.as_ref());
        world.register_machine("ghost-m1", &ghost_node, &ghost_mkeys);

        let recover_calls = Arc::new(AtomicUsize::new(0));
        let buffered: Arc<Mutex<BTreeMap<u64, DataRecord>>> = Arc::new(Mutex::new(BTreeMap::new()));

        let session = world.admin_session("edge1-m1");
        let group = kg("app.user.temps");
        session
            .setup_keygroup(
                &group,
                &[
                    (EntityId::node("edge1").unwrap(), Ttl::Disabled),
                    (ghost_node.clone(), Ttl::Disabled),
                ],
                &[],
                &[],
            )
            .unwrap();
        let secret = session.fetch_keygroup(&group).unwrap().secret;

        let ghost_ep = Endpoint::named("ghost-m1");
        let handler: ReqHandler = {
            let calls = recover_calls.clone();
            let buffered = buffered.clone();
            let secret = secret.clone();
            let entropy = world.entropy.clone();
            Arc::new(move |_from, payload| {
                if let Ok(request) = PeerRequest::decode(payload) {
                    let reply = match request {
                        PeerRequest::RecoverRange { counters, .. } => {
                            calls.fetch_add(1, Ordering::SeqCst);
                            let buffered = buffered.lock().unwrap();
                            let items = counters
                                .iter()
                                .map(|c| {
                                    let item = match buffered.get(c) {
                                        Some(record) => RecoveryItem::Current(crypto::seal_record(
                                            record,
                                            &secret,
                                            entropy.as_ref(),
                                        )),
                                        None => RecoveryItem::Evicted,
                                    };
                                    (*c, item)
                                })
                                .collect();
                            PeerReply::Recovered(items)
                        }
                        PeerRequest::LatestCounter { .. } => PeerReply::Latest {
                            counter: buffered.lock().unwrap().keys().max().copied().unwrap_or(0),
                        },
                        PeerRequest::StatePull { .. } => PeerReply::State(vec![]),
                    };
                    return reply.encode();
                }
                // Config hints and other client traffic: acknowledge.
                fogrep_core::proto::ClientOutcome(Ok(fogrep_core::proto::ClientReply::HintAck)).encode()
            })
        };
        world.net.register_endpoint(&ghost_ep, handler).unwrap();
        world.net.run_for(2_000);
        assert!(
            receiver.subscribed_keygroups().contains(&group),
            "receiver subscribes to the ghost sender's topic"
        );

        ScriptedSender {
            world,
            receiver,
            group,
            secret,
            ghost_node,
            ghost_ep,
            recover_calls,
            buffered,
        }
    }

    fn record(&self, key: &str, ts: u64) -> DataRecord {
        DataRecord::new(self.group.clone(), key, fields(&ts.to_string()), ts, self.ghost_node.clone()).unwrap()
    }

    /// Publishes one counter-stamped update as the ghost sender, and
    /// remembers it as "buffered" unless told otherwise.
    fn publish(&self, counter: u64, record: &DataRecord, buffer_it: bool) {
        if buffer_it {
            self.buffered.lock().unwrap().insert(counter, record.clone());
        }
        let update = UpdateMessage {
            sender_node: self.ghost_node.clone(),
            keygroup: self.group.clone(),
            counter,
            payload: crypto::seal_record(record, &self.secret, self.world.entropy.as_ref()),
            secret_version: self.secret.version,
        };
        self.world
            .net
            .publish(&self.ghost_ep, &Topic::for_keygroup(&self.group), &update.encode());
    }

    fn cursor(&self) -> fogrep_core::storage::ReceiverCursor {
        self.receiver
            .cursors(&self.group)
            .get(&self.ghost_node)
            .cloned()
            .unwrap_or_default()
    }
}

#[test]
fn in_order_counters_apply_without_gaps() {
    let s = ScriptedSender::new(10);
    for c in 1..=3u64 {
        let rec = s.record(&format!("k{c}"), 100 + c);
        s.publish(c, &rec, true);
    }
    s.world.net.run_for(1_000);
    let cursor = s.cursor();
    assert_eq!(cursor.highest_applied, 3);
    assert!(cursor.pending.is_empty());
    assert!(cursor.lost.is_empty());
    assert_eq!(s.receiver.record_map(&s.group).len(), 3);
    assert_eq!(s.recover_calls.load(Ordering::SeqCst), 0, "no remote recovery needed");
}

#[test]
fn skipped_counter_is_recovered_from_sender_buffer() {
    let s = ScriptedSender::new(11);
    let r1 = s.record("k1", 101);
    let r2 = s.record("k2", 102);
    let r3 = s.record("k3", 103);
    s.publish(1, &r1, true);
    // Counter 2 is "lost on the wire" but stays in the sender buffer.
    s.buffered.lock().unwrap().insert(2, r2.clone());
    s.publish(3, &r3, true);
    s.world.net.run_for(2_000);

    let cursor = s.cursor();
    assert_eq!(cursor.highest_applied, 3);
    assert!(cursor.pending.is_empty(), "gap was recovered");
    assert!(cursor.lost.is_empty());
    assert!(s.recover_calls.load(Ordering::SeqCst) >= 1);
    let map = s.receiver.record_map(&s.group);
    assert_eq!(map.len(), 3);
    assert_eq!(map["k2"], r2, "recovery merged the current record for the missed key");

    let events = s.world.events();
    assert!(events.iter().any(|e| matches!(e, DaemonEvent::GapsDetected { counters, .. } if counters == &vec![2])));
}

#[test]
fn reordered_arrival_resolves_gap_without_remote_request() {
    let s = ScriptedSender::new(12);
    let r1 = s.record("k1", 101);
    let r2 = s.record("k2", 102);
    // Counter 2 first (gap {1} opens), then 1 arrives late.
    s.publish(2, &r2, true);
    s.world.net.run_for(10);
    s.publish(1, &r1, true);
    s.world.net.run_for(50);

    let cursor = s.cursor();
    assert_eq!(cursor.highest_applied, 2);
    assert!(cursor.pending.is_empty(), "late arrival resolved the gap locally");
    s.world.net.run_for(2_000);
    assert_eq!(
        s.recover_calls.load(Ordering::SeqCst),
        0,
        "no remote request for a locally resolved gap"
    );
    assert_eq!(s.receiver.record_map(&s.group).len(), 2);
}

#[test]
fn duplicate_counters_are_applied_at_most_once() {
    let s = ScriptedSender::new(13);
    let r1 = s.record("k1", 101);
    s.publish(1, &r1, true);
    s.world.net.run_for(100);
    s.publish(1, &r1, true);
    s.world.net.run_for(100);

    let applied: Vec<_> = s
        .world
        .events()
        .iter()
        .filter(|e| matches!(e, DaemonEvent::UpdateApplied { .. }))
        .cloned()
        .collect();
    assert_eq!(applied.len(), 1, "counter merged exactly once");
    assert!(s
        .world
        .events()
        .iter()
        .any(|e| matches!(e, DaemonEvent::DuplicateIgnored { counter: 1, .. })));
}

#[test]
fn evicted_counters_become_permanently_lost() {
    let s = ScriptedSender::new(14);
    let r1 = s.record("k1", 101);
    let r5 = s.record("k5", 105);
    s.publish(1, &r1, true);
    // Counters 2..4 never arrive and are NOT in the sender buffer.
    s.publish(5, &r5, true);
    s.world.net.run_for(3_000);

    let cursor = s.cursor();
    assert!(cursor.pending.is_empty());
    assert_eq!(
        cursor.lost.iter().copied().collect::<Vec<_>>(),
        vec![2, 3, 4],
        "exactly the evicted counters are lost"
    );
    let lost_events: Vec<_> = s
        .world
        .events()
        .iter()
        .filter(|e| matches!(e, DaemonEvent::CounterLost { reason: LossReason::Evicted, .. }))
        .cloned()
        .collect();
    assert_eq!(lost_events.len(), 3);
    // Accounting: applied + pending + lost partition 1..=5.
    let applied = cursor.applied_counters();
    assert_eq!(applied.iter().copied().collect::<Vec<_>>(), vec![1, 5]);
}

#[test]
fn update_sealed_with_unknown_version_is_discarded_not_applied() {
    let s = ScriptedSender::new(15);
    let r1 = s.record("k1", 101);
    let wrong_secret = SecretVersion {
        version: 9,
        key_material: [9u8; 16],
    };
    let update = UpdateMessage {
        sender_node: s.ghost_node.clone(),
        keygroup: s.group.clone(),
        counter: 1,
        payload: crypto::seal_record(&r1, &wrong_secret, s.world.entropy.as_ref()),
        secret_version: 9,
    };
    s.world
        .net
        .publish(&s.ghost_ep, &Topic::for_keygroup(&s.group), &update.encode());
    s.world.net.run_for(500);

    assert!(s.receiver.record_map(&s.group).is_empty());
    assert_eq!(s.cursor().highest_applied, 0, "cursor untouched; counter stays recoverable");
    assert!(s
        .world
        .events()
        .iter()
        .any(|e| matches!(e, DaemonEvent::DecryptFailed { .. })));
}

#[test]
fn probe_detects_tail_loss_and_recovers_it() {
    let mut world = World::new(16, &[]);
    let receiver = world.add_daemon_node("edge1", DaemonParams {
        probe_period_ms: 300,
        ..DaemonParams::default()
    });
    let ghost_keys = IdentityKeys::generate(world.entropy.as_ref());
    let ghost_node = world.register_node("ghost", &ghost_keys);
    let ghost_mkeys = IdentityKeys::generate(world.entropy.as_ref());
    world.register_machine("ghost-m1", &ghost_node, &ghost_mkeys);

    let session = world.admin_session("edge1-m1");
    let group = kg("app.user.temps");
    session
        .setup_keygroup(
            &group,
            &[
                (EntityId::node("edge1").unwrap(), Ttl::Disabled),
                (ghost_node.clone(), Ttl::Disabled),
            ],
            &[],
            &[],
        )
        .unwrap();
    let secret = session.fetch_keygroup(&group).unwrap().secret;

    // Ghost "published" counters 1..=2 but nothing was ever delivered
    // (total loss). Only the probe can reveal them.
    let r1 = DataRecord::new(group.clone(), "k1", fields("a"), 101, ghost_node.clone()).unwrap();
    let r2 = DataRecord::new(group.clone(), "k2", fields("b"), 102, ghost_node.clone()).unwrap();
    let buffered = BTreeMap::from([(1u64, r1.clone()), (2u64, r2.clone())]);
    let ghost_ep = Endpoint::named("ghost-m1");
    let handler: ReqHandler = {
        let secret = secret.clone();
        let entropy = world.entropy.clone();
        Arc::new(move |_from, payload| {
            if let Ok(request) = PeerRequest::decode(payload) {
                let reply = match request {
                    PeerRequest::LatestCounter { .. } => PeerReply::Latest { counter: 2 },
                    PeerRequest::RecoverRange { counters, .. } => PeerReply::Recovered(
                        counters
                            .iter()
                            .map(|c| {
                                (
                                    *c,
                                    buffered
                                        .get(c)
                                        .map(|r| RecoveryItem::Current(crypto::seal_record(r, &secret, entropy.as_ref())))
                                        .unwrap_or(RecoveryItem::Evicted),
                                )
                            })
                            .collect(),
                    ),
                    PeerRequest::StatePull { .. } => PeerReply::State(vec![]),
                };
                return reply.encode();
            }
            fogrep_core::proto::ClientOutcome(Ok(fogrep_core::proto::ClientReply::HintAck)).encode()
        })
    };
    world.net.register_endpoint(&ghost_ep, handler).unwrap();
    world.net.run_for(3_000);

    let map = receiver.record_map(&group);
    assert_eq!(map.len(), 2, "probe revealed and recovery fetched the tail updates");
    assert_eq!(map["k1"], r1);
    assert_eq!(map["k2"], r2);
}

#[test]
fn naming_outage_leaves_node_serving_from_cache() {
    let mut world = World::new(17, &[]);
    let _edge = world.add_daemon_node("edge1", DaemonParams::default());
    let session = world.admin_session("edge1-m1");
    let group = kg("app.user.temps");
    session
        .setup_keygroup(&group, &[(EntityId::node("edge1").unwrap(), Ttl::Disabled)], &[], &[])
        .unwrap();
    session.put(&group, "t1", fields("x")).unwrap();
    world.net.run_for(500);

    // Take the naming service off the bus entirely.
    world.net.unregister_endpoint("naming");
    world.net.run_for(5_000);

    assert!(
        world
            .events()
            .iter()
            .any(|e| matches!(e, DaemonEvent::NamingUnreachable { .. })),
        "refresh noticed the outage"
    );
    // Reads and writes still served from the cached configuration.
    assert!(session.get(&group, "t1").unwrap().is_some());
    session.put(&group, "t2", fields("y")).unwrap();
    assert!(session.get(&group, "t2").unwrap().is_some());
}

#[test]
fn machine_equivalence_across_a_node() {
    let world = World::new(18, &[]);
    // One node with two machines sharing a connector.
    let node_keys = IdentityKeys::generate(world.entropy.as_ref());
    let node = world.register_node("edge1", &node_keys);
    let connector: Arc<MemoryConnector> = Arc::new(MemoryConnector::new());
    let mut daemons = Vec::new();
    for m in ["edge1-m1", "edge1-m2"] {
        let mkeys = Arc::new(IdentityKeys::generate(world.entropy.as_ref()));
        world.register_machine(m, &node, &mkeys);
        let daemon = Daemon::start(
            DaemonConfig {
                node_id: node.clone(),
                machine_id: EntityId::machine(m).unwrap(),
                endpoint: Endpoint::named(m),
                keys: mkeys,
                naming_endpoint: NamingService::endpoint(),
                naming_public: world.naming_public.clone(),
                params: DaemonParams::default(),
            },
            world.net.clone(),
            world.net.clone(),
            world.net.clone(),
            connector.clone(),
            world.entropy.clone(),
            collector(&world.events),
        )
        .unwrap();
        daemons.push(daemon);
    }

    let session = world.admin_session("edge1-m1");
    let group = kg("app.user.temps");
    session
        .setup_keygroup(&group, &[(node.clone(), Ttl::Disabled)], &[], &[])
        .unwrap();
    world.net.run_for(500);

    session.put(&group, "t1", fields("21.5")).unwrap();
    // The same read through either machine gives the same result.
    let via_m1 = session.get(&group, "t1").unwrap().unwrap();
    session.set_target(Endpoint::named("edge1-m2"));
    let via_m2 = session.get(&group, "t1").unwrap().unwrap();
    assert_eq!(via_m1, via_m2);
    // And a write through m2 is visible through m1.
    session.put(&group, "t2", fields("9")).unwrap();
    session.set_target(Endpoint::named("edge1-m1"));
    assert!(session.get(&group, "t2").unwrap().is_some());
    let _ = world.net.now_ms();
}

#[test]
fn trigger_stream_sees_every_update_and_rejects_non_trigger_node() {
    let mut world = World::new(19, &[]);
    let _edge = world.add_daemon_node("edge1", DaemonParams::default());
    let tower = world.add_daemon_node("tower1", DaemonParams::default());
    let session = world.admin_session("edge1-m1");
    let group = kg("app.user.temps");
    session
        .setup_keygroup(
            &group,
            &[(EntityId::node("edge1").unwrap(), Ttl::Disabled)],
            &[EntityId::node("tower1").unwrap()],
            &[],
        )
        .unwrap();
    world.net.run_for(2_000);

    // Consume on the trigger node.
    let consumer = world.admin_session("tower1-m1");
    consumer.trigger_subscribe(&group, "tail").unwrap();
    for i in 0..5 {
        session.put(&group, &format!("k{i}"), fields(&i.to_string())).unwrap();
    }
    world.net.run_for(2_000);
    let batch = consumer.trigger_poll(&group, "tail", 100).unwrap();
    assert_eq!(batch.len(), 5, "consumer sees all five updates");
    assert!(consumer.trigger_poll(&group, "tail", 100).unwrap().is_empty(), "exactly once");

    // Trigger ops on a replica-only node are refused.
    let wrong = world.admin_session("edge1-m1");
    match wrong.trigger_subscribe(&group, "tail") {
        Err(fogrep_core::client::SessionError::Client(ClientError::NotTriggerNode)) => {}
        other => panic!("expected NotTriggerNode, got {other:?}"),
    }
    let _ = tower.machine_id();
}

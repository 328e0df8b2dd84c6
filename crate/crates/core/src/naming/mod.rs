//! Strictly consistent naming and configuration service.
//!
//! Single point of truth for identifiers and configuration: registration
//! and tombstoning of nodes, machines and clients; keygroup metadata
//! lifecycle with automatic secret rotation; authorization policy
//! enforcement; geo queries. All mutations apply in one total order and
//! are journaled before acknowledgement; a single-threaded replay of the
//! accepted-mutation log reproduces the exact store state.

pub mod client;
pub mod journal;
pub mod protocol;
pub mod server;

use std::collections::BTreeMap;

use crate::model::{
    EntityId, EntityKind, EntityStatus, GeoPoint, KeygroupMetadata, KeygroupName, ReplicaConfig, SecretVersion,
};

use protocol::{
    AcceptedMutation, ConfigTarget, EntityDescriptor, KeygroupChange, NamingError, NamingOp, NamingReply,
};

/// A registered identity with its lifecycle status and a version that
/// bumps whenever the descriptor changes (e.g. a node's machine list).
#[derive(Debug, Clone, PartialEq)]
pub struct RegisteredEntity {
    pub descriptor: EntityDescriptor,
    pub status: EntityStatus,
    pub version: u64,
}

impl RegisteredEntity {
    pub fn is_active(&self) -> bool {
        self.status == EntityStatus::Active
    }
}

/// The in-memory configuration store: every read reflects all prior
/// acknowledged writes; tombstoned ids are never reassigned.
#[derive(Default, Clone)]
pub struct NamingState {
    entities: BTreeMap<EntityId, RegisteredEntity>,
    keygroups: BTreeMap<KeygroupName, KeygroupMetadata>,
    /// Names ever used by a node, machine or client; permanent.
    names_taken: std::collections::BTreeSet<String>,
    log_version: u64,
    bootstrapped: bool,
    accepted: Vec<AcceptedMutation>,
}

impl NamingState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn log_version(&self) -> u64 {
        self.log_version
    }

    pub fn is_bootstrapped(&self) -> bool {
        self.bootstrapped
    }

    pub fn accepted_log(&self) -> &[AcceptedMutation] {
        &self.accepted
    }

    pub fn entity(&self, id: &EntityId) -> Option<&RegisteredEntity> {
        self.entities.get(id)
    }

    pub fn keygroup(&self, name: &KeygroupName) -> Option<&KeygroupMetadata> {
        self.keygroups.get(name)
    }

    pub fn keygroups(&self) -> impl Iterator<Item = &KeygroupMetadata> {
        self.keygroups.values()
    }

    /// Public key registered for an entity, any status.
    pub fn public_key_of(&self, id: &EntityId) -> Option<&[u8]> {
        self.entities.get(id).map(|e| e.descriptor.public_key())
    }

    /// Active machines of a node, name-sorted.
    pub fn machines_of(&self, node: &EntityId) -> Vec<&crate::model::MachineDescriptor> {
        let Some(RegisteredEntity {
            descriptor: EntityDescriptor::Node(node_desc),
            ..
        }) = self.entities.get(node)
        else {
            return Vec::new();
        };
        node_desc
            .machine_ids
            .iter()
            .filter_map(|mid| match self.entities.get(mid) {
                Some(RegisteredEntity {
                    descriptor: EntityDescriptor::Machine(m),
                    status: EntityStatus::Active,
                    ..
                }) => Some(m),
                _ => None,
            })
            .collect()
    }

    fn require_principal(&self, caller: &EntityId) -> Result<(), NamingError> {
        // Only nodes and application clients authenticate with the naming
        // service; machines act on behalf of their node.
        if !matches!(caller.kind(), EntityKind::Node | EntityKind::Client) {
            return Err(NamingError::Unauthenticated);
        }
        match self.entities.get(caller) {
            Some(e) if e.is_active() => Ok(()),
            _ => Err(NamingError::Unauthenticated),
        }
    }

    fn node_is_usable(&self, node: &EntityId) -> bool {
        if node.kind() != EntityKind::Node {
            return false;
        }
        match self.entities.get(node) {
            Some(e) if e.is_active() => !self.machines_of(node).is_empty(),
            _ => false,
        }
    }

    fn insert_entity(&mut self, descriptor: EntityDescriptor) {
        let id = descriptor.id().clone();
        self.names_taken.insert(id.name().to_string());
        self.entities.insert(
            id,
            RegisteredEntity {
                descriptor,
                status: EntityStatus::Active,
                version: 1,
            },
        );
    }

    /// Applies one operation for an authenticated caller. Mutations are
    /// recorded in the accepted log; reads leave no trace. `material`
    /// supplies key material when the operation creates or rotates a
    /// keygroup secret; replay overrides it with the recorded secret.
    pub fn apply(
        &mut self,
        caller: &EntityId,
        op: &NamingOp,
        material: [u8; 16],
    ) -> Result<NamingReply, NamingError> {
        let (reply, secret) = self.apply_inner(caller, op, None, material)?;
        if op.is_mutation() {
            self.log_version += if matches!(op, NamingOp::Bootstrap { .. }) { 2 } else { 1 };
            self.accepted.push(AcceptedMutation {
                log_version: self.log_version,
                caller: caller.clone(),
                op: op.clone(),
                secret,
            });
        }
        Ok(reply)
    }

    /// Rebuilds a state from an accepted-mutation log. The recorded
    /// secrets make the replay byte-exact.
    pub fn replay(log: &[AcceptedMutation]) -> Result<NamingState, NamingError> {
        let mut state = NamingState::new();
        for mutation in log {
            state.apply_inner(&mutation.caller, &mutation.op, mutation.secret.as_ref(), [0u8; 16])?;
            state.log_version = mutation.log_version;
            state.accepted.push(mutation.clone());
        }
        Ok(state)
    }

    /// True when this state equals `other` observationally (entities,
    /// keygroups, log position).
    pub fn same_store(&self, other: &NamingState) -> bool {
        self.entities == other.entities
            && self.keygroups == other.keygroups
            && self.log_version == other.log_version
            && self.bootstrapped == other.bootstrapped
    }

    fn apply_inner(
        &mut self,
        caller: &EntityId,
        op: &NamingOp,
        secret_override: Option<&SecretVersion>,
        material: [u8; 16],
    ) -> Result<(NamingReply, Option<SecretVersion>), NamingError> {
        match op {
            NamingOp::Bootstrap { node, client } => {
                if self.bootstrapped {
                    return Err(NamingError::AlreadyBootstrapped);
                }
                if node.id.kind() != EntityKind::Node || client.id.kind() != EntityKind::Client {
                    return Err(NamingError::BadRequest("bootstrap needs a node and a client".into()));
                }
                if node.id.name() == client.id.name() {
                    return Err(NamingError::NameTaken);
                }
                if !node.machine_ids.is_empty() {
                    return Err(NamingError::BadRequest(
                        "machine list is registry-managed; register machines separately".into(),
                    ));
                }
                validate_key(&node.public_key)?;
                validate_key(&client.public_key)?;
                self.insert_entity(EntityDescriptor::Node(node.clone()));
                self.insert_entity(EntityDescriptor::Client(client.clone()));
                self.bootstrapped = true;
                Ok((NamingReply::Done, None))
            }
            NamingOp::Register { descriptor } => {
                self.require_principal(caller)?;
                let id = descriptor.id().clone();
                if self.names_taken.contains(id.name()) {
                    return Err(NamingError::NameTaken);
                }
                validate_key(descriptor.public_key())?;
                match descriptor {
                    EntityDescriptor::Node(node) => {
                        if !node.machine_ids.is_empty() {
                            return Err(NamingError::BadRequest(
                                "machine list is registry-managed; register machines separately".into(),
                            ));
                        }
                        self.insert_entity(descriptor.clone());
                    }
                    EntityDescriptor::Machine(machine) => {
                        let parent = machine.node_id.clone();
                        match self.entities.get(&parent) {
                            Some(e) if e.is_active() && matches!(e.descriptor, EntityDescriptor::Node(_)) => {}
                            _ => return Err(NamingError::UnknownParentNode),
                        }
                        self.insert_entity(descriptor.clone());
                        // The machine list of a node is stored here so other
                        // nodes notice membership changes via config reads.
                        let entry = self.entities.get_mut(&parent).expect("parent checked above");
                        if let EntityDescriptor::Node(node_desc) = &mut entry.descriptor {
                            node_desc.machine_ids.push(id.clone());
                            node_desc.machine_ids.sort();
                        }
                        entry.version += 1;
                    }
                    EntityDescriptor::Client(_) => {
                        self.insert_entity(descriptor.clone());
                    }
                }
                Ok((NamingReply::Registered(id), None))
            }
            NamingOp::Tombstone { id } => {
                self.require_principal(caller)?;
                match self.entities.get(id) {
                    Some(e) if e.is_active() => {}
                    _ => return Err(NamingError::NotFound),
                }
                if id.kind() == EntityKind::Node {
                    let referenced = self.keygroups.values().any(|kg| kg.is_member(id));
                    if referenced {
                        return Err(NamingError::StillReferenced);
                    }
                    if !self.machines_of(id).is_empty() {
                        return Err(NamingError::StillReferenced);
                    }
                }
                if id.kind() == EntityKind::Machine {
                    let parent = match &self.entities.get(id).unwrap().descriptor {
                        EntityDescriptor::Machine(m) => Some(m.node_id.clone()),
                        _ => None,
                    };
                    if let Some(parent) = parent {
                        if let Some(entry) = self.entities.get_mut(&parent) {
                            if let EntityDescriptor::Node(node_desc) = &mut entry.descriptor {
                                node_desc.machine_ids.retain(|m| m != id);
                            }
                            entry.version += 1;
                        }
                    }
                }
                let entry = self.entities.get_mut(id).unwrap();
                entry.status = EntityStatus::Tombstoned;
                entry.version += 1;
                Ok((NamingReply::Done, None))
            }
            NamingOp::CreateKeygroup {
                name,
                initial_replica,
                initial_ttl,
            } => {
                self.require_principal(caller)?;
                if self.keygroups.contains_key(name) {
                    return Err(NamingError::NameTaken);
                }
                if !self.node_is_usable(initial_replica) {
                    return Err(NamingError::UnknownNode);
                }
                let secret = secret_override.cloned().unwrap_or(SecretVersion {
                    version: 1,
                    key_material: material,
                });
                let mut authorized_clients = std::collections::BTreeSet::new();
                if caller.kind() == EntityKind::Client {
                    authorized_clients.insert(caller.clone());
                }
                let meta = KeygroupMetadata {
                    name: name.clone(),
                    version: 1,
                    replica_nodes: BTreeMap::from([(initial_replica.clone(), ReplicaConfig { ttl: *initial_ttl })]),
                    trigger_nodes: Default::default(),
                    authorized_clients,
                    secret: secret.clone(),
                };
                self.keygroups.insert(name.clone(), meta.clone());
                Ok((NamingReply::Metadata(meta), Some(secret)))
            }
            NamingOp::UpdateKeygroup { name, change } => {
                self.require_principal(caller)?;
                let Some(current) = self.keygroups.get(name) else {
                    return Err(NamingError::UnknownKeygroup);
                };
                match caller.kind() {
                    EntityKind::Client => {
                        if !current.is_authorized_client(caller) {
                            return Err(NamingError::Forbidden);
                        }
                    }
                    EntityKind::Node => {
                        // Nodes cannot add themselves to existing keygroups,
                        // but they can add other nodes to their own.
                        if !current.is_member(caller) {
                            return Err(NamingError::Forbidden);
                        }
                        if change.added_node() == Some(caller) {
                            return Err(NamingError::Forbidden);
                        }
                    }
                    _ => return Err(NamingError::Unauthenticated),
                }
                let mut meta = current.clone();
                let mut rotated = None;
                match change {
                    KeygroupChange::AddReplica { node, ttl } => {
                        if !self.node_is_usable(node) {
                            return Err(NamingError::UnknownNode);
                        }
                        meta.replica_nodes.insert(node.clone(), ReplicaConfig { ttl: *ttl });
                    }
                    KeygroupChange::RemoveReplica { node } => {
                        if !meta.replica_nodes.contains_key(node) {
                            return Err(NamingError::UnknownNode);
                        }
                        if meta.replica_nodes.len() == 1 {
                            return Err(NamingError::LastReplica);
                        }
                        meta.replica_nodes.remove(node);
                    }
                    KeygroupChange::AddTrigger { node } => {
                        if !self.node_is_usable(node) {
                            return Err(NamingError::UnknownNode);
                        }
                        meta.trigger_nodes.insert(node.clone());
                    }
                    KeygroupChange::RemoveTrigger { node } => {
                        if !meta.trigger_nodes.remove(node) {
                            return Err(NamingError::UnknownNode);
                        }
                    }
                    KeygroupChange::SetTtl { node, ttl } => {
                        let Some(cfg) = meta.replica_nodes.get_mut(node) else {
                            return Err(NamingError::UnknownNode);
                        };
                        cfg.ttl = *ttl;
                    }
                    KeygroupChange::AddClient { client } => {
                        match self.entities.get(client) {
                            Some(e) if e.is_active() && client.kind() == EntityKind::Client => {}
                            _ => return Err(NamingError::NotFound),
                        }
                        meta.authorized_clients.insert(client.clone());
                    }
                    KeygroupChange::RemoveClient { client } => {
                        if !meta.authorized_clients.remove(client) {
                            return Err(NamingError::NotFound);
                        }
                    }
                }
                if change.removes_node() {
                    // The secret is rotated whenever a node leaves the
                    // keygroup's node set, locking it out of future traffic.
                    let next = secret_override.cloned().unwrap_or(SecretVersion {
                        version: meta.secret.version + 1,
                        key_material: material,
                    });
                    meta.secret = next.clone();
                    rotated = Some(next);
                }
                meta.version += 1;
                self.keygroups.insert(name.clone(), meta.clone());
                Ok((NamingReply::Metadata(meta), rotated))
            }
            NamingOp::GetConfig { target, cached_version } => {
                self.require_principal(caller)?;
                match target {
                    ConfigTarget::Entity(id) => {
                        let Some(entry) = self.entities.get(id) else {
                            return Err(NamingError::NotFound);
                        };
                        if !entry.is_active() {
                            return Err(NamingError::NotFound);
                        }
                        if *cached_version == Some(entry.version) {
                            return Ok((NamingReply::UpToDate, None));
                        }
                        Ok((
                            NamingReply::Entity {
                                descriptor: entry.descriptor.clone(),
                                version: entry.version,
                            },
                            None,
                        ))
                    }
                    ConfigTarget::Keygroup(name) => {
                        let Some(meta) = self.keygroups.get(name) else {
                            return Err(NamingError::NotFound);
                        };
                        // The secret travels with the metadata, so only
                        // member nodes and authorized clients may read it.
                        let allowed = match caller.kind() {
                            EntityKind::Node => meta.is_member(caller),
                            EntityKind::Client => meta.is_authorized_client(caller),
                            _ => false,
                        };
                        if !allowed {
                            return Err(NamingError::Forbidden);
                        }
                        if *cached_version == Some(meta.version) {
                            return Ok((NamingReply::UpToDate, None));
                        }
                        Ok((NamingReply::Metadata(meta.clone()), None))
                    }
                }
            }
            NamingOp::QueryNodesByRegion { region } => {
                self.require_principal(caller)?;
                let bbox = crate::model::BoundingBox::new(region.min_lat, region.min_lon, region.max_lat, region.max_lon)
                    .map_err(|_| NamingError::MalformedRegion)?;
                let mut nodes: Vec<crate::model::NodeDescriptor> = self
                    .entities
                    .values()
                    .filter(|e| e.is_active())
                    .filter_map(|e| match &e.descriptor {
                        EntityDescriptor::Node(n) => Some(n),
                        _ => None,
                    })
                    .filter(|n| bbox.contains(&n.location))
                    .cloned()
                    .collect();
                nodes.sort_by(|a, b| a.id.name().cmp(b.id.name()));
                Ok((NamingReply::Nodes(nodes), None))
            }
        }
    }
}

fn validate_key(key: &[u8]) -> Result<(), NamingError> {
    crate::crypto::PublicKeySet::from_bytes(key)
        .map(|_| ())
        .map_err(|e| NamingError::BadRequest(format!("bad public key: {e}")))
}

/// Convenience constructor for descriptors used by deployment tooling.
pub fn node_descriptor(name: &str, lat: f64, lon: f64, public_key: Vec<u8>) -> Result<crate::model::NodeDescriptor, NamingError> {
    Ok(crate::model::NodeDescriptor {
        id: EntityId::node(name).map_err(|e| NamingError::BadRequest(e.to_string()))?,
        location: GeoPoint::new(lat, lon).map_err(|e| NamingError::BadRequest(e.to_string()))?,
        machine_ids: Vec::new(),
        public_key,
    })
}

#[cfg(test)]
mod tests {
    use super::protocol::*;
    use super::*;
    use crate::crypto::{EntropyExt, IdentityKeys, SeededEntropy};
    use crate::model::Ttl;

    struct Fixture {
        state: NamingState,
        entropy: SeededEntropy,
        admin: EntityId,
    }

    impl Fixture {
        fn new() -> Self {
            let entropy = SeededEntropy::new(1);
            let mut state = NamingState::new();
            let node_keys = IdentityKeys::generate(&entropy);
            let client_keys = IdentityKeys::generate(&entropy);
            let admin = EntityId::client("admin").unwrap();
            state
                .apply(
                    &admin,
                    &NamingOp::Bootstrap {
                        node: node_descriptor("n0", 52.52, 13.40, node_keys.public().to_bytes()).unwrap(),
                        client: crate::model::ClientDescriptor {
                            id: admin.clone(),
                            public_key: client_keys.public().to_bytes(),
                        },
                    },
                    [0u8; 16],
                )
                .unwrap();
            Fixture { state, entropy, admin }
        }

        fn material(&self) -> [u8; 16] {
            self.entropy.bytes()
        }

        fn add_node(&mut self, name: &str, lat: f64, lon: f64) -> EntityId {
            let keys = IdentityKeys::generate(&self.entropy);
            let admin = self.admin.clone();
            self.state
                .apply(
                    &admin,
                    &NamingOp::Register {
                        descriptor: EntityDescriptor::Node(node_descriptor(name, lat, lon, keys.public().to_bytes()).unwrap()),
                    },
                    self.material(),
                )
                .unwrap();
            let node = EntityId::node(name).unwrap();
            self.add_machine(&format!("{name}-m1"), &node);
            node
        }

        fn add_machine(&mut self, name: &str, node: &EntityId) -> EntityId {
            let keys = IdentityKeys::generate(&self.entropy);
            let admin = self.admin.clone();
            let id = EntityId::machine(name).unwrap();
            self.state
                .apply(
                    &admin,
                    &NamingOp::Register {
                        descriptor: EntityDescriptor::Machine(crate::model::MachineDescriptor {
                            id: id.clone(),
                            node_id: node.clone(),
                            address: String::new(),
                            public_key: keys.public().to_bytes(),
                        }),
                    },
                    self.material(),
                )
                .unwrap();
            id
        }

        fn create_kg(&mut self, name: &str, replica: &EntityId) -> KeygroupName {
            let kg = KeygroupName::parse(name).unwrap();
            let admin = self.admin.clone();
            self.state
                .apply(
                    &admin,
                    &NamingOp::CreateKeygroup {
                        name: kg.clone(),
                        initial_replica: replica.clone(),
                        initial_ttl: Ttl::Disabled,
                    },
                    self.material(),
                )
                .unwrap();
            kg
        }
    }

    #[test]
    fn bootstrap_registers_two_entities_at_log_version_two() {
        let f = Fixture::new();
        assert_eq!(f.state.log_version(), 2);
        assert!(f.state.entity(&EntityId::node("n0").unwrap()).unwrap().is_active());
        assert!(f.state.entity(&EntityId::client("admin").unwrap()).unwrap().is_active());
    }

    #[test]
    fn second_bootstrap_fails() {
        let mut f = Fixture::new();
        let keys = IdentityKeys::generate(&f.entropy);
        let err = f
            .state
            .apply(
                &EntityId::client("other").unwrap(),
                &NamingOp::Bootstrap {
                    node: node_descriptor("n9", 0.0, 0.0, keys.public().to_bytes()).unwrap(),
                    client: crate::model::ClientDescriptor {
                        id: EntityId::client("other").unwrap(),
                        public_key: keys.public().to_bytes(),
                    },
                },
                [0u8; 16],
            )
            .unwrap_err();
        assert_eq!(err, NamingError::AlreadyBootstrapped);
    }

    #[test]
    fn unregistered_caller_cannot_register() {
        let mut f = Fixture::new();
        let keys = IdentityKeys::generate(&f.entropy);
        let rogue = EntityId::client("rogue").unwrap();
        let err = f
            .state
            .apply(
                &rogue,
                &NamingOp::Register {
                    descriptor: EntityDescriptor::Node(node_descriptor("x1", 0.0, 0.0, keys.public().to_bytes()).unwrap()),
                },
                f.material(),
            )
            .unwrap_err();
        assert_eq!(err, NamingError::Unauthenticated);
    }

    #[test]
    fn names_are_never_reused() {
        let mut f = Fixture::new();
        let tower = f.add_node("tower1", 52.52, 13.40);
        // Same name again: taken.
        let keys = IdentityKeys::generate(&f.entropy);
        let admin = f.admin.clone();
        let err = f
            .state
            .apply(
                &admin,
                &NamingOp::Register {
                    descriptor: EntityDescriptor::Node(node_descriptor("tower1", 0.0, 0.0, keys.public().to_bytes()).unwrap()),
                },
                f.material(),
            )
            .unwrap_err();
        assert_eq!(err, NamingError::NameTaken);
        // Tombstone all machines, then the node, then try to re-register.
        let m1 = EntityId::machine("tower1-m1").unwrap();
        f.state
            .apply(&admin, &NamingOp::Tombstone { id: m1 }, f.material())
            .unwrap();
        f.state
            .apply(&admin, &NamingOp::Tombstone { id: tower.clone() }, f.material())
            .unwrap();
        let keys = IdentityKeys::generate(&f.entropy);
        let err = f
            .state
            .apply(
                &admin,
                &NamingOp::Register {
                    descriptor: EntityDescriptor::Node(node_descriptor("tower1", 0.0, 0.0, keys.public().to_bytes()).unwrap()),
                },
                f.material(),
            )
            .unwrap_err();
        assert_eq!(err, NamingError::NameTaken, "tombstoned names stay retired");
        // Tombstoning twice: NotFound.
        let err = f
            .state
            .apply(&admin, &NamingOp::Tombstone { id: tower }, f.material())
            .unwrap_err();
        assert_eq!(err, NamingError::NotFound);
    }

    #[test]
    fn tombstone_of_keygroup_member_is_refused() {
        let mut f = Fixture::new();
        let node = f.add_node("edge1", 10.0, 10.0);
        f.create_kg("app.user.temps", &node);
        let admin = f.admin.clone();
        let err = f
            .state
            .apply(&admin, &NamingOp::Tombstone { id: node }, f.material())
            .unwrap_err();
        assert_eq!(err, NamingError::StillReferenced);
    }

    #[test]
    fn create_keygroup_yields_version_one_and_secret_one() {
        let mut f = Fixture::new();
        let node = f.add_node("edge1", 10.0, 10.0);
        let kg = f.create_kg("app.user.temps", &node);
        let meta = f.state.keygroup(&kg).unwrap();
        assert_eq!(meta.version, 1);
        assert_eq!(meta.secret.version, 1);
        assert!(meta.is_authorized_client(&f.admin));
        // Recreate: NameTaken. Unknown node: UnknownNode.
        let admin = f.admin.clone();
        let err = f
            .state
            .apply(
                &admin,
                &NamingOp::CreateKeygroup {
                    name: kg,
                    initial_replica: node,
                    initial_ttl: Ttl::Disabled,
                },
                f.material(),
            )
            .unwrap_err();
        assert_eq!(err, NamingError::NameTaken);
        let err = f
            .state
            .apply(
                &admin,
                &NamingOp::CreateKeygroup {
                    name: KeygroupName::parse("other.kg").unwrap(),
                    initial_replica: EntityId::node("ghost").unwrap(),
                    initial_ttl: Ttl::Disabled,
                },
                f.material(),
            )
            .unwrap_err();
        assert_eq!(err, NamingError::UnknownNode);
    }

    #[test]
    fn member_node_can_add_other_nodes_but_not_itself() {
        let mut f = Fixture::new();
        let edge = f.add_node("edge1", 10.0, 10.0);
        let cloud = f.add_node("cloud1", 20.0, 20.0);
        let rogue = f.add_node("rogue", 30.0, 30.0);
        let kg = f.create_kg("app.user.temps", &edge);

        // Member node edge1 adds cloud1: allowed, version bumps.
        let reply = f
            .state
            .apply(
                &edge,
                &NamingOp::UpdateKeygroup {
                    name: kg.clone(),
                    change: KeygroupChange::AddReplica {
                        node: cloud.clone(),
                        ttl: Ttl::Disabled,
                    },
                },
                f.material(),
            )
            .unwrap();
        match reply {
            NamingReply::Metadata(meta) => {
                assert_eq!(meta.version, 2);
                assert!(meta.is_replica(&cloud));
            }
            other => panic!("unexpected reply {other:?}"),
        }

        // A non-member node adding itself: Forbidden.
        let err = f
            .state
            .apply(
                &rogue,
                &NamingOp::UpdateKeygroup {
                    name: kg.clone(),
                    change: KeygroupChange::AddReplica {
                        node: rogue.clone(),
                        ttl: Ttl::Disabled,
                    },
                },
                f.material(),
            )
            .unwrap_err();
        assert_eq!(err, NamingError::Forbidden);

        // Even a member cannot add itself (e.g. as trigger).
        let err = f
            .state
            .apply(
                &edge,
                &NamingOp::UpdateKeygroup {
                    name: kg,
                    change: KeygroupChange::AddTrigger { node: edge.clone() },
                },
                f.material(),
            )
            .unwrap_err();
        assert_eq!(err, NamingError::Forbidden);
    }

    #[test]
    fn remove_replica_rotates_secret_and_keeps_last_replica() {
        let mut f = Fixture::new();
        let tower = f.add_node("tower1", 10.0, 10.0);
        let cloud = f.add_node("cloud1", 20.0, 20.0);
        let kg = f.create_kg("app.user.kg", &tower);
        let admin = f.admin.clone();
        f.state
            .apply(
                &admin,
                &NamingOp::UpdateKeygroup {
                    name: kg.clone(),
                    change: KeygroupChange::AddReplica {
                        node: cloud.clone(),
                        ttl: Ttl::Disabled,
                    },
                },
                f.material(),
            )
            .unwrap();
        let before = f.state.keygroup(&kg).unwrap().secret.clone();
        assert_eq!(before.version, 1);
        f.state
            .apply(
                &admin,
                &NamingOp::UpdateKeygroup {
                    name: kg.clone(),
                    change: KeygroupChange::RemoveReplica { node: tower },
                },
                f.material(),
            )
            .unwrap();
        let after = f.state.keygroup(&kg).unwrap();
        assert_eq!(after.secret.version, 2);
        assert_ne!(after.secret.key_material, before.key_material);
        assert_eq!(after.replica_nodes.len(), 1);
        // Removing the final replica: LastReplica.
        let err = f
            .state
            .apply(
                &admin,
                &NamingOp::UpdateKeygroup {
                    name: kg,
                    change: KeygroupChange::RemoveReplica { node: cloud },
                },
                f.material(),
            )
            .unwrap_err();
        assert_eq!(err, NamingError::LastReplica);
    }

    #[test]
    fn get_config_versioned_reads_and_forbidden_for_outsiders() {
        let mut f = Fixture::new();
        let edge = f.add_node("edge1", 10.0, 10.0);
        let outsider = f.add_node("outsider", 50.0, 50.0);
        let kg = f.create_kg("app.user.temps", &edge);
        let admin = f.admin.clone();

        let reply = f
            .state
            .apply(
                &admin,
                &NamingOp::GetConfig {
                    target: ConfigTarget::Keygroup(kg.clone()),
                    cached_version: Some(1),
                },
                f.material(),
            )
            .unwrap();
        assert_eq!(reply, NamingReply::UpToDate);

        f.state
            .apply(
                &admin,
                &NamingOp::UpdateKeygroup {
                    name: kg.clone(),
                    change: KeygroupChange::SetTtl {
                        node: edge.clone(),
                        ttl: Ttl::Millis(1000),
                    },
                },
                f.material(),
            )
            .unwrap();
        let reply = f
            .state
            .apply(
                &admin,
                &NamingOp::GetConfig {
                    target: ConfigTarget::Keygroup(kg.clone()),
                    cached_version: Some(1),
                },
                f.material(),
            )
            .unwrap();
        match reply {
            NamingReply::Metadata(meta) => assert_eq!(meta.version, 2),
            other => panic!("unexpected reply {other:?}"),
        }

        let err = f
            .state
            .apply(
                &outsider,
                &NamingOp::GetConfig {
                    target: ConfigTarget::Keygroup(kg),
                    cached_version: None,
                },
                f.material(),
            )
            .unwrap_err();
        assert_eq!(err, NamingError::Forbidden);
    }

    #[test]
    fn region_query_matches_linear_scan_oracle() {
        let mut f = Fixture::new();
        // A grid of nodes across the globe.
        let coords: Vec<(f64, f64)> = (0..12)
            .map(|i| (-60.0 + 11.0 * i as f64, -150.0 + 27.0 * i as f64))
            .collect();
        for (i, (lat, lon)) in coords.iter().enumerate() {
            f.add_node(&format!("grid{i:02}"), *lat, *lon);
        }
        let admin = f.admin.clone();
        let region = Region {
            min_lat: -30.0,
            min_lon: -100.0,
            max_lat: 45.0,
            max_lon: 100.0,
        };
        let reply = f
            .state
            .apply(&admin, &NamingOp::QueryNodesByRegion { region }, f.material())
            .unwrap();
        let NamingReply::Nodes(got) = reply else { panic!() };
        // Independent oracle: linear scan over the registry.
        let bbox = crate::model::BoundingBox::new(-30.0, -100.0, 45.0, 100.0).unwrap();
        let mut expected: Vec<String> = f
            .state
            .entities
            .values()
            .filter(|e| e.is_active())
            .filter_map(|e| match &e.descriptor {
                EntityDescriptor::Node(n) if bbox.contains(&n.location) => Some(n.id.name().to_string()),
                _ => None,
            })
            .collect();
        expected.sort();
        let got_names: Vec<String> = got.iter().map(|n| n.id.name().to_string()).collect();
        assert_eq!(got_names, expected);
        assert!(!got_names.is_empty());

        // Whole-earth box returns every active node, none tombstoned.
        let reply = f
            .state
            .apply(
                &admin,
                &NamingOp::QueryNodesByRegion {
                    region: Region {
                        min_lat: -90.0,
                        min_lon: -180.0,
                        max_lat: 90.0,
                        max_lon: 180.0,
                    },
                },
                f.material(),
            )
            .unwrap();
        let NamingReply::Nodes(all) = reply else { panic!() };
        assert_eq!(all.len(), 13, "12 grid nodes + bootstrap node");

        // Degenerate box with no nodes.
        let reply = f
            .state
            .apply(
                &admin,
                &NamingOp::QueryNodesByRegion {
                    region: Region {
                        min_lat: 89.0,
                        min_lon: 179.0,
                        max_lat: 90.0,
                        max_lon: 180.0,
                    },
                },
                f.material(),
            )
            .unwrap();
        assert_eq!(reply, NamingReply::Nodes(vec![]));

        // min > max: malformed.
        let err = f
            .state
            .apply(
                &admin,
                &NamingOp::QueryNodesByRegion {
                    region: Region {
                        min_lat: 10.0,
                        min_lon: 0.0,
                        max_lat: -10.0,
                        max_lon: 0.0,
                    },
                },
                f.material(),
            )
            .unwrap_err();
        assert_eq!(err, NamingError::MalformedRegion);
    }

    #[test]
    fn replay_of_accepted_log_reproduces_state() {
        let mut f = Fixture::new();
        let edge = f.add_node("edge1", 10.0, 10.0);
        let cloud = f.add_node("cloud1", 20.0, 20.0);
        let kg = f.create_kg("app.user.temps", &edge);
        let admin = f.admin.clone();
        f.state
            .apply(
                &admin,
                &NamingOp::UpdateKeygroup {
                    name: kg.clone(),
                    change: KeygroupChange::AddReplica {
                        node: cloud,
                        ttl: Ttl::Millis(2000),
                    },
                },
                f.material(),
            )
            .unwrap();
        f.state
            .apply(
                &admin,
                &NamingOp::UpdateKeygroup {
                    name: kg,
                    change: KeygroupChange::RemoveReplica { node: edge },
                },
                f.material(),
            )
            .unwrap();
        let replayed = NamingState::replay(f.state.accepted_log()).unwrap();
        assert!(replayed.same_store(&f.state));
    }

    #[test]
    fn secret_rotation_count_matches_removals() {
        let mut f = Fixture::new();
        let nodes: Vec<EntityId> = (0..4).map(|i| f.add_node(&format!("node{i}"), 0.0, 0.0)).collect();
        let kg = f.create_kg("rotate.kg", &nodes[0]);
        let admin = f.admin.clone();
        for node in &nodes[1..] {
            f.state
                .apply(
                    &admin,
                    &NamingOp::UpdateKeygroup {
                        name: kg.clone(),
                        change: KeygroupChange::AddReplica {
                            node: node.clone(),
                            ttl: Ttl::Disabled,
                        },
                    },
                    f.material(),
                )
                .unwrap();
            f.state
                .apply(
                    &admin,
                    &NamingOp::UpdateKeygroup {
                        name: kg.clone(),
                        change: KeygroupChange::AddTrigger { node: node.clone() },
                    },
                    f.material(),
                )
                .unwrap();
        }
        f.state
            .apply(
                &admin,
                &NamingOp::UpdateKeygroup {
                    name: kg.clone(),
                    change: KeygroupChange::RemoveReplica { node: nodes[1].clone() },
                },
                f.material(),
            )
            .unwrap();
        f.state
            .apply(
                &admin,
                &NamingOp::UpdateKeygroup {
                    name: kg.clone(),
                    change: KeygroupChange::RemoveTrigger { node: nodes[2].clone() },
                },
                f.material(),
            )
            .unwrap();
        let removals = f
            .state
            .accepted_log()
            .iter()
            .filter(|m| match &m.op {
                NamingOp::UpdateKeygroup { change, .. } => change.removes_node(),
                _ => false,
            })
            .count() as u64;
        let meta = f.state.keygroup(&kg).unwrap();
        assert_eq!(meta.secret.version - 1, removals);
        assert_eq!(removals, 2);
    }
}

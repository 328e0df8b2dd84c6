//! Socket-backed deployments for demos: the same topology building as the
//! simulator, but over localhost TCP, the wall clock and durable file
//! storage. Writes the naming key, client identities and an endpoint
//! listing into a state directory so the command-line client can connect.
//! The fault-injection layer does not apply to this backend.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use fogrep_core::client::{Channel, ClientIdentity, ClientSession};
use fogrep_core::crypto::{EntropySource, IdentityKeys, OsEntropy, PublicKeySet};
use fogrep_core::daemon::{events, Daemon, DaemonConfig};
use fogrep_core::model::{
    ClientDescriptor, EntityId, GeoPoint, KeygroupName, MachineDescriptor, NodeDescriptor, Ttl,
};
use fogrep_core::naming::client::{NamingAccess, NamingClient};
use fogrep_core::naming::journal::FileJournal;
use fogrep_core::naming::protocol::{EntityDescriptor, NamingOp};
use fogrep_core::naming::server::NamingService;
use fogrep_core::storage::file::FileConnector;
use fogrep_core::storage::StorageConnector;
use fogrep_core::transport::socket::SocketBus;
use fogrep_core::transport::{Bus, Endpoint, ThreadRuntime};

use crate::cluster::HarnessError;
use crate::spec::{ClusterSpec, SpecError};

pub struct ServeOptions {
    /// First TCP port; 0 assigns ephemeral ports.
    pub base_port: u16,
    pub state_dir: PathBuf,
}

/// A running socket deployment. Dropping it stops nothing by itself; call
/// [`Served::shutdown`].
pub struct Served {
    pub bus: Arc<SocketBus>,
    pub naming: Arc<NamingService>,
    pub naming_addr: String,
    pub naming_public: PublicKeySet,
    pub daemons: BTreeMap<String, Arc<Daemon>>,
    pub machine_addrs: BTreeMap<String, String>,
    pub admin: ClientIdentity,
    pub client_identities: BTreeMap<String, ClientIdentity>,
}

impl Served {
    pub fn shutdown(&self) {
        for daemon in self.daemons.values() {
            daemon.shutdown();
        }
        self.bus.shutdown();
    }

    pub fn session(&self, client: &str, target_machine: &str) -> Result<ClientSession, HarnessError> {
        let identity = if client == "cluster-admin" {
            ClientIdentity {
                id: self.admin.id.clone(),
                keys: self.admin.keys.clone(),
            }
        } else {
            let found = self
                .client_identities
                .get(client)
                .ok_or_else(|| HarnessError::Other(format!("unknown client {client}")))?;
            ClientIdentity {
                id: found.id.clone(),
                keys: found.keys.clone(),
            }
        };
        let addr = self
            .machine_addrs
            .get(target_machine)
            .ok_or_else(|| HarnessError::Other(format!("unknown machine {target_machine}")))?;
        Ok(ClientSession::new(
            identity,
            Channel::Socket,
            Endpoint::with_addr(target_machine, addr.clone()),
            self.naming_public.clone(),
            Arc::new(OsEntropy),
            3_000,
        ))
    }
}

fn build_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Build(e.to_string())
}

pub fn serve(spec: &ClusterSpec, options: &ServeOptions) -> Result<Served, HarnessError> {
    spec.validate()?;
    std::fs::create_dir_all(&options.state_dir).map_err(build_err)?;
    let entropy: Arc<dyn EntropySource> = Arc::new(OsEntropy);
    let bus = SocketBus::new();
    let runtime = Arc::new(ThreadRuntime);

    let mut next_port = options.base_port;
    let mut alloc_addr = move || -> String {
        if next_port == 0 {
            "127.0.0.1:0".to_string()
        } else {
            let addr = format!("127.0.0.1:{next_port}");
            next_port += 1;
            addr
        }
    };

    // Naming service on its own socket, journaled in the state dir.
    let naming_keys = IdentityKeys::generate(entropy.as_ref());
    let journal = FileJournal::open(options.state_dir.join("naming.journal")).map_err(build_err)?;
    let naming = NamingService::open(Box::new(journal), naming_keys, entropy.clone()).map_err(build_err)?;
    let naming_public = naming.public_key();
    let naming_endpoint = Endpoint::with_addr(fogrep_core::naming::server::NAMING_ENDPOINT, alloc_addr());
    naming.serve(bus.as_ref(), &naming_endpoint).map_err(build_err)?;
    let naming_addr = bus
        .local_addr(fogrep_core::naming::server::NAMING_ENDPOINT)
        .ok_or_else(|| HarnessError::Build("naming listener missing".into()))?;
    std::fs::write(options.state_dir.join("naming.pub"), naming_public.to_bytes()).map_err(build_err)?;

    // Daemons come up first so their listeners exist; machines register
    // with the bound addresses afterwards.
    let mut daemons: BTreeMap<String, Arc<Daemon>> = BTreeMap::new();
    let mut machine_addrs: BTreeMap<String, String> = BTreeMap::new();
    let mut machine_keys: BTreeMap<String, Arc<IdentityKeys>> = BTreeMap::new();
    let mut node_keys: BTreeMap<String, Arc<IdentityKeys>> = BTreeMap::new();
    let naming_ep_for_daemons = Endpoint::with_addr(fogrep_core::naming::server::NAMING_ENDPOINT, naming_addr.clone());
    for node in &spec.nodes {
        node_keys.insert(node.name.clone(), Arc::new(IdentityKeys::generate(entropy.as_ref())));
        let connector: Arc<dyn StorageConnector> = Arc::new(
            FileConnector::open(options.state_dir.join("nodes").join(&node.name)).map_err(build_err)?,
        );
        for machine_name in spec.machine_names(node) {
            let keys = Arc::new(IdentityKeys::generate(entropy.as_ref()));
            let endpoint = Endpoint::with_addr(&machine_name, alloc_addr());
            let daemon = Daemon::start(
                DaemonConfig {
                    node_id: EntityId::node(&node.name).map_err(build_err)?,
                    machine_id: EntityId::machine(&machine_name).map_err(build_err)?,
                    endpoint,
                    keys: keys.clone(),
                    naming_endpoint: naming_ep_for_daemons.clone(),
                    naming_public: naming_public.clone(),
                    params: spec.daemon_params(),
                },
                bus.clone(),
                runtime.clone(),
                runtime.clone(),
                connector.clone(),
                entropy.clone(),
                events::null_sink(),
            )
            .map_err(build_err)?;
            let addr = bus
                .local_addr(&machine_name)
                .ok_or_else(|| HarnessError::Build(format!("machine {machine_name} has no listener")))?;
            machine_addrs.insert(machine_name.clone(), addr);
            machine_keys.insert(machine_name.clone(), keys);
            daemons.insert(machine_name, daemon);
        }
    }

    // Registry bootstrap and registration over the socket bus.
    let admin = ClientIdentity::generate("cluster-admin", entropy.as_ref()).map_err(build_err)?;
    let admin_naming = NamingClient::new(
        NamingAccess {
            sender: admin.id.clone(),
            keys: admin.keys.clone(),
            naming_public: naming_public.clone(),
            entropy: entropy.clone(),
        },
        bus.clone() as Arc<dyn Bus>,
        Endpoint::named("cluster-admin"),
        Endpoint::with_addr(fogrep_core::naming::server::NAMING_ENDPOINT, naming_addr.clone()),
        3_000,
    );

    let first = &spec.nodes[0];
    admin_naming
        .call(
            &admin.id,
            &admin.keys,
            NamingOp::Bootstrap {
                node: NodeDescriptor {
                    id: EntityId::node(&first.name).map_err(build_err)?,
                    location: GeoPoint::new(first.location[0], first.location[1]).map_err(build_err)?,
                    machine_ids: vec![],
                    public_key: node_keys[&first.name].public().to_bytes(),
                },
                client: ClientDescriptor {
                    id: admin.id.clone(),
                    public_key: admin.public().to_bytes(),
                },
            },
        )
        .map_err(|e| HarnessError::Build(format!("bootstrap: {e}")))?;
    for node in spec.nodes.iter().skip(1) {
        admin_naming
            .call(
                &admin.id,
                &admin.keys,
                NamingOp::Register {
                    descriptor: EntityDescriptor::Node(NodeDescriptor {
                        id: EntityId::node(&node.name).map_err(build_err)?,
                        location: GeoPoint::new(node.location[0], node.location[1]).map_err(build_err)?,
                        machine_ids: vec![],
                        public_key: node_keys[&node.name].public().to_bytes(),
                    }),
                },
            )
            .map_err(|e| HarnessError::Build(format!("register node {}: {e}", node.name)))?;
    }
    for node in &spec.nodes {
        for machine_name in spec.machine_names(node) {
            admin_naming
                .call(
                    &admin.id,
                    &admin.keys,
                    NamingOp::Register {
                        descriptor: EntityDescriptor::Machine(MachineDescriptor {
                            id: EntityId::machine(&machine_name).map_err(build_err)?,
                            node_id: EntityId::node(&node.name).map_err(build_err)?,
                            address: machine_addrs[&machine_name].clone(),
                            public_key: machine_keys[&machine_name].public().to_bytes(),
                        }),
                    },
                )
                .map_err(|e| HarnessError::Build(format!("register machine {machine_name}: {e}")))?;
        }
    }

    let mut client_identities = BTreeMap::new();
    for client in &spec.clients {
        let identity = ClientIdentity::generate(client, entropy.as_ref()).map_err(build_err)?;
        admin_naming
            .call(
                &admin.id,
                &admin.keys,
                NamingOp::Register {
                    descriptor: EntityDescriptor::Client(ClientDescriptor {
                        id: identity.id.clone(),
                        public_key: identity.public().to_bytes(),
                    }),
                },
            )
            .map_err(|e| HarnessError::Build(format!("register client {client}: {e}")))?;
        identity
            .save(&options.state_dir.join(format!("{client}.identity")))
            .map_err(build_err)?;
        client_identities.insert(client.clone(), identity);
    }
    admin
        .save(&options.state_dir.join("cluster-admin.identity"))
        .map_err(build_err)?;

    let served = Served {
        bus,
        naming,
        naming_addr,
        naming_public,
        daemons,
        machine_addrs,
        admin,
        client_identities,
    };

    // Keygroups through real client sessions over sockets.
    for kg_spec in &spec.keygroups {
        let kg = KeygroupName::parse(&kg_spec.name).map_err(build_err)?;
        let creator = kg_spec.clients.first().map(|s| s.as_str()).unwrap_or("cluster-admin");
        let target = format!("{}-m1", kg_spec.replicas[0].node);
        let session = served.session(creator, &target)?;
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

    // Wait (wall clock) until cross-subscriptions exist.
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let mut ready = true;
        for kg_spec in &spec.keygroups {
            let kg = KeygroupName::parse(&kg_spec.name).unwrap();
            let mut members: Vec<&String> = kg_spec.replicas.iter().map(|r| &r.node).collect();
            members.extend(kg_spec.triggers.iter());
            for member in members {
                let senders = kg_spec.replicas.iter().filter(|r| &r.node != member).count();
                if senders == 0 {
                    continue;
                }
                let node = spec.node(member).unwrap();
                let subscribed = spec
                    .machine_names(node)
                    .iter()
                    .any(|m| served.daemons[m].subscribed_keygroups().contains(&kg));
                if !subscribed {
                    ready = false;
                }
            }
        }
        if ready {
            break;
        }
        if Instant::now() > deadline {
            return Err(HarnessError::Build("subscriptions not established in time".into()));
        }
        std::thread::sleep(Duration::from_millis(100));
    }

    write_endpoints_file(&options.state_dir, &served)?;
    Ok(served)
}

fn write_endpoints_file(state_dir: &Path, served: &Served) -> Result<(), HarnessError> {
    let mut text = format!("naming\t{}\n", served.naming_addr);
    for (machine, addr) in &served.machine_addrs {
        text.push_str(&format!("{machine}\t{addr}\n"));
    }
    std::fs::write(state_dir.join("endpoints.tsv"), text).map_err(|e| HarnessError::Io(e.to_string()))
}

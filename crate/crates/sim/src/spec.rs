//! Declarative cluster specifications: one stanza per node and keygroup,
//! plus fault schedule, cost model, runtime parameters and the run to
//! execute. A spec plus a seed fully determines a run.

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

use fogrep_core::daemon::{CostModel, DaemonParams};
use fogrep_core::model::{validate_keygroup_name, validate_token, GeoPoint, Ttl};
use fogrep_core::transport::{DelayModel, FaultProfile, PartitionWindow};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("spec invalid: {0}")]
    Invalid(String),
    #[error("spec parse: {0}")]
    Parse(String),
}

fn invalid(msg: impl Into<String>) -> SpecError {
    SpecError::Invalid(msg.into())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "node", default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(rename = "keygroup", default)]
    pub keygroups: Vec<KeygroupSpec>,
    #[serde(default)]
    pub clients: Vec<String>,
    #[serde(default)]
    pub faults: Option<FaultSpec>,
    #[serde(default)]
    pub costs: Option<CostSpec>,
    #[serde(default)]
    pub params: Option<ParamsSpec>,
    #[serde(default)]
    pub run: Option<RunSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    /// [latitude, longitude] in decimal degrees.
    pub location: [f64; 2],
    #[serde(default = "one")]
    pub machines: u32,
    #[serde(default)]
    pub connector: ConnectorKind,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectorKind {
    #[default]
    Memory,
    File,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeygroupSpec {
    pub name: String,
    pub replicas: Vec<ReplicaSpec>,
    #[serde(default)]
    pub triggers: Vec<String>,
    #[serde(default)]
    pub clients: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaSpec {
    pub node: String,
    #[serde(default)]
    pub ttl: TtlSpec,
}

/// TTL as written in a spec file: an integer of milliseconds, a string
/// like "2000ms", or "disabled".
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TtlSpec {
    Millis(u64),
    Text(String),
}

impl Default for TtlSpec {
    fn default() -> Self {
        TtlSpec::Text("disabled".to_string())
    }
}

impl TtlSpec {
    pub fn to_ttl(&self) -> Result<Ttl, SpecError> {
        match self {
            TtlSpec::Millis(ms) => Ok(Ttl::Millis(*ms)),
            TtlSpec::Text(text) => Ttl::from_str(text).map_err(|e| invalid(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    #[serde(default)]
    pub drop: f64,
    #[serde(default)]
    pub reorder: f64,
    #[serde(default)]
    pub delay: Option<DelaySpec>,
    #[serde(default)]
    pub reorder_window: u64,
    #[serde(rename = "partition", default)]
    pub partitions: Vec<PartitionSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    #[serde(default)]
    pub fixed: Option<u64>,
    #[serde(default)]
    pub uniform: Option<[u64; 2]>,
}

/// A partition between two sets of nodes over a virtual-time window,
/// relative to fault activation.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub a: Vec<String>,
    pub b: Vec<String>,
    pub start: u64,
    pub end: u64,
    /// Include the naming service endpoint on side B.
    #[serde(default)]
    pub cut_naming: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    #[serde(default)]
    pub verify: u64,
    #[serde(default)]
    pub storage_get: u64,
    #[serde(default)]
    pub storage_put: u64,
    #[serde(default)]
    pub storage_delete: u64,
    #[serde(default)]
    pub seal: u64,
    #[serde(default)]
    pub open: u64,
    #[serde(default)]
    pub publish: u64,
}

impl CostSpec {
    pub fn to_model(&self) -> CostModel {
        CostModel {
            verify_ms: self.verify,
            storage_get_ms: self.storage_get,
            storage_put_ms: self.storage_put,
            storage_delete_ms: self.storage_delete,
            seal_ms: self.seal,
            open_ms: self.open,
            publish_ms: self.publish,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    pub buffer: Option<usize>,
    pub heartbeat_ms: Option<u64>,
    pub machine_timeout_ms: Option<u64>,
    pub refresh_ms: Option<u64>,
    pub probe_ms: Option<u64>,
    pub retry_base_ms: Option<u64>,
    pub retry_cap_ms: Option<u64>,
    pub request_timeout_ms: Option<u64>,
    pub secret_grace_ms: Option<u64>,
}

impl ParamsSpec {
    pub fn apply(&self, mut params: DaemonParams) -> DaemonParams {
        if let Some(v) = self.buffer {
            params.sender_buffer_capacity = v;
        }
        if let Some(v) = self.heartbeat_ms {
            params.heartbeat_period_ms = v;
        }
        if let Some(v) = self.machine_timeout_ms {
            params.machine_timeout_ms = v;
        }
        if let Some(v) = self.refresh_ms {
            params.refresh_period_ms = v;
        }
        if let Some(v) = self.probe_ms {
            params.probe_period_ms = v;
        }
        if let Some(v) = self.retry_base_ms {
            params.retry_base_ms = v;
        }
        if let Some(v) = self.retry_cap_ms {
            params.retry_cap_ms = v;
        }
        if let Some(v) = self.request_timeout_ms {
            params.request_timeout_ms = v;
        }
        if let Some(v) = self.secret_grace_ms {
            params.secret_grace_ms = v;
        }
        params
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub kind: RunKind,
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub keygroup: Option<String>,
    #[serde(default)]
    pub ops: Option<u64>,
    #[serde(default)]
    pub pace_ms: Option<u64>,
    #[serde(default)]
    pub settle_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Scenario,
    Staleness,
    Latency,
    Convergence,
}

impl ClusterSpec {
    pub fn from_toml(text: &str) -> Result<ClusterSpec, SpecError> {
        let spec: ClusterSpec = toml::from_str(text).map_err(|e| SpecError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<ClusterSpec, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|e| SpecError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Machine names of one node: `<node>-m<i>`, 1-based.
    pub fn machine_names(&self, node: &NodeSpec) -> Vec<String> {
        (1..=node.machines).map(|i| format!("{}-m{i}", node.name)).collect()
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.nodes.is_empty() {
            return Err(invalid("at least one node is required"));
        }
        let mut node_names = BTreeSet::new();
        for node in &self.nodes {
            validate_token(&node.name).map_err(|e| invalid(e.to_string()))?;
            if !node_names.insert(node.name.clone()) {
                return Err(invalid(format!("duplicate node name {}", node.name)));
            }
            GeoPoint::new(node.location[0], node.location[1]).map_err(|e| invalid(e.to_string()))?;
            if node.machines == 0 {
                return Err(invalid(format!("node {} needs at least one machine", node.name)));
            }
        }
        let mut client_names = BTreeSet::new();
        for client in &self.clients {
            validate_token(client).map_err(|e| invalid(e.to_string()))?;
            if !client_names.insert(client.clone()) {
                return Err(invalid(format!("duplicate client name {client}")));
            }
        }
        let mut kg_names = BTreeSet::new();
        for kg in &self.keygroups {
            validate_keygroup_name(&kg.name).map_err(|e| invalid(e.to_string()))?;
            if !kg_names.insert(kg.name.clone()) {
                return Err(invalid(format!("duplicate keygroup {}", kg.name)));
            }
            if kg.replicas.is_empty() {
                return Err(invalid(format!("keygroup {} needs at least one replica", kg.name)));
            }
            for replica in &kg.replicas {
                if !node_names.contains(&replica.node) {
                    return Err(invalid(format!(
                        "keygroup {} references unknown node {}",
                        kg.name, replica.node
                    )));
                }
                replica.ttl.to_ttl()?;
            }
            for trigger in &kg.triggers {
                if !node_names.contains(trigger) {
                    return Err(invalid(format!("keygroup {} references unknown node {trigger}", kg.name)));
                }
            }
            for client in &kg.clients {
                if !client_names.contains(client) {
                    return Err(invalid(format!("keygroup {} references unknown client {client}", kg.name)));
                }
            }
        }
        if let Some(faults) = &self.faults {
            if !(0.0..=1.0).contains(&faults.drop) || !(0.0..=1.0).contains(&faults.reorder) {
                return Err(invalid("fault probabilities must lie in [0, 1]"));
            }
            for p in &faults.partitions {
                for side in [&p.a, &p.b] {
                    for node in side {
                        if !node_names.contains(node) {
                            return Err(invalid(format!("partition references unknown node {node}")));
                        }
                    }
                }
                if p.start >= p.end {
                    return Err(invalid("partition window must have start < end"));
                }
            }
        }
        Ok(())
    }

    pub fn daemon_params(&self) -> DaemonParams {
        let mut params = DaemonParams::default();
        if let Some(costs) = &self.costs {
            params.costs = costs.to_model();
        }
        if let Some(spec) = &self.params {
            params = spec.apply(params);
        }
        params
    }

    /// Builds the transport fault profile. Partition windows are relative
    /// to `activate_at_ms` and node names expand to machine endpoints.
    pub fn fault_profile(&self, activate_at_ms: u64) -> Option<FaultProfile> {
        let faults = self.faults.as_ref()?;
        let delay = match &faults.delay {
            None => DelayModel::Fixed(0),
            Some(DelaySpec { fixed: Some(ms), .. }) => DelayModel::Fixed(*ms),
            Some(DelaySpec {
                uniform: Some([min, max]),
                ..
            }) => DelayModel::Uniform { min: *min, max: *max },
            Some(_) => DelayModel::Fixed(0),
        };
        let expand = |names: &[String], include_naming: bool| -> BTreeSet<String> {
            let mut endpoints = BTreeSet::new();
            for name in names {
                if let Some(node) = self.node(name) {
                    endpoints.extend(self.machine_names(node));
                }
            }
            if include_naming {
                endpoints.insert(fogrep_core::naming::server::NAMING_ENDPOINT.to_string());
            }
            endpoints
        };
        let partitions = faults
            .partitions
            .iter()
            .map(|p| PartitionWindow {
                side_a: expand(&p.a, false),
                side_b: expand(&p.b, p.cut_naming),
                start_ms: activate_at_ms + p.start,
                end_ms: activate_at_ms + p.end,
            })
            .collect();
        Some(FaultProfile {
            drop_probability: faults.drop,
            delay,
            reorder_probability: faults.reorder,
            reorder_window_ms: faults.reorder_window,
            partitions,
            rng_seed: self.seed,
        })
    }
}

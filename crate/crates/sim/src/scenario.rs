//! Scripted end-to-end scenarios: a remote research station buffering
//! measurements at the edge, a carsharing fleet pipeline through trigger
//! nodes, and a mobile client migrating between cell towers. Each script
//! drives a cluster built from its embedded spec, checks its
//! postconditions, and renders a deterministic report including the loss
//! accounting partition.

use std::collections::BTreeMap;
use std::str::FromStr;

use fogrep_core::daemon::events::{DaemonEvent, DecryptFailure};
use fogrep_core::model::{EntityId, KeygroupName};
use fogrep_core::transport::{FaultProfile, PartitionWindow};

use crate::cluster::{Cluster, HarnessError};
use crate::report::{Assertion, Report, Section};
use crate::spec::ClusterSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    ResearchStation,
    Carsharing,
    MobileMigration,
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::ResearchStation => "research-station",
            ScenarioKind::Carsharing => "carsharing",
            ScenarioKind::MobileMigration => "mobile-migration",
        }
    }

    pub fn all() -> [ScenarioKind; 3] {
        [
            ScenarioKind::ResearchStation,
            ScenarioKind::Carsharing,
            ScenarioKind::MobileMigration,
        ]
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "research-station" => Ok(ScenarioKind::ResearchStation),
            "carsharing" => Ok(ScenarioKind::Carsharing),
            "mobile-migration" => Ok(ScenarioKind::MobileMigration),
            other => Err(format!("unknown scenario {other:?}")),
        }
    }
}

/// Production timescales (hours, days) shrink to seconds so suites run on
/// virtual time; the scaled values live in the specs, not the scripts.
pub const RESEARCH_STATION_SPEC: &str = r#"
# Remote research station: measurements buffered briefly at the edge
# (one day in production, scaled to 2 s), replicated persistently to the
# cloud, aggregated there via a trigger stream, and fanned out to a
# university replica keygroup.
seed = 0
clients = ["researcher", "aggregator"]

[[node]]
name = "station"
location = [-75.1, -0.5]

[[node]]
name = "cloudA"
location = [50.1, 8.7]

[[node]]
name = "uni"
location = [52.5, 13.4]

[[keygroup]]
name = "polar.stationA.measurements"
replicas = [ { node = "station", ttl = 2000 }, { node = "cloudA" } ]
triggers = ["cloudA"]
clients = ["researcher", "aggregator"]

[[keygroup]]
name = "polar.stationA.processed"
replicas = [ { node = "cloudA" }, { node = "uni" } ]
clients = ["aggregator", "researcher"]
"#;

pub const CARSHARING_SPEC: &str = r#"
# Carsharing fleet management: vehicle sensors buffer readings in the car
# (24 h in production, scaled to 3 s); a preprocessor in the vehicle
# consumes them from a trigger stream, compresses, and uploads to a buffer
# replica node whose keygroup feeds the fleet-management software through
# another trigger node.
seed = 0
clients = ["car", "uploader", "manager"]

[[node]]
name = "vehicle42"
location = [48.1, 11.6]

[[node]]
name = "buffer"
location = [50.1, 8.7]

[[node]]
name = "fleet"
location = [52.5, 13.4]

[[keygroup]]
name = "fleet.vehicle42.sensors"
replicas = [ { node = "vehicle42", ttl = 3000 } ]
triggers = ["vehicle42"]
clients = ["car", "uploader"]

[[keygroup]]
name = "fleet.vehicle42.uploads"
replicas = [ { node = "buffer" } ]
triggers = ["fleet"]
clients = ["uploader", "manager"]
"#;

pub const MOBILE_MIGRATION_SPEC: &str = r#"
# Mobile app with a moving client: app data lives at the nearest cell
# tower plus the cloud; when the client moves, the tower-1 replica is
# swapped for tower 2 (add before remove), rotating the keygroup secret
# exactly once and locking the old tower out of new traffic.
seed = 0
clients = ["alice"]

[[node]]
name = "tower1"
location = [52.50, 13.30]

[[node]]
name = "tower2"
location = [52.52, 13.45]

[[node]]
name = "cloudB"
location = [50.1, 8.7]

[[keygroup]]
name = "mobileapp.alice.appdata"
replicas = [ { node = "tower1" }, { node = "cloudB" } ]
clients = ["alice"]
"#;

pub fn spec_for(kind: ScenarioKind, seed: u64) -> ClusterSpec {
    let text = match kind {
        ScenarioKind::ResearchStation => RESEARCH_STATION_SPEC,
        ScenarioKind::Carsharing => CARSHARING_SPEC,
        ScenarioKind::MobileMigration => MOBILE_MIGRATION_SPEC,
    };
    let mut spec = ClusterSpec::from_toml(text).expect("embedded scenario spec is valid");
    spec.seed = seed;
    spec
}

/// Runs one scenario against a cluster built from a matching spec. The
/// report carries every scripted postcondition plus loss accounting; a
/// violated assertion also surfaces as `ScenarioAssertionFailed`.
pub fn run_scenario(kind: ScenarioKind, cluster: &Cluster) -> Result<Report, HarnessError> {
    match kind {
        ScenarioKind::ResearchStation => research_station(cluster),
        ScenarioKind::Carsharing => carsharing(cluster),
        ScenarioKind::MobileMigration => mobile_migration(cluster),
    }
}

/// Convenience: build from the embedded spec and run.
pub fn run(kind: ScenarioKind, seed: u64) -> Result<Report, HarnessError> {
    let cluster = Cluster::build(spec_for(kind, seed))?;
    run_scenario(kind, &cluster)
}

fn check(assertions: &mut Vec<Assertion>, name: &str, passed: bool, detail: String) {
    assertions.push(Assertion {
        name: name.to_string(),
        passed,
        detail,
    });
}

fn finish(mut report: Report, assertions: Vec<Assertion>) -> Result<Report, HarnessError> {
    let first_failure = assertions.iter().find(|a| !a.passed).cloned();
    report.push(Section::Assertions(assertions));
    if let Some(failure) = first_failure {
        return Err(HarnessError::ScenarioAssertionFailed(format!(
            "{}: {}",
            failure.name, failure.detail
        )));
    }
    Ok(report)
}

fn value(i: u64) -> BTreeMap<String, Vec<u8>> {
    BTreeMap::from([("v".to_string(), i.to_string().into_bytes())])
}

fn research_station(cluster: &Cluster) -> Result<Report, HarnessError> {
    let measurements = KeygroupName::parse("polar.stationA.measurements").unwrap();
    let processed = KeygroupName::parse("polar.stationA.processed").unwrap();
    let ttl_ms: u64 = 2_000;
    let total: u64 = 20;

    let researcher = cluster.new_session("researcher", &cluster.first_machine("station"))?;
    let aggregator = cluster.new_session("aggregator", &cluster.first_machine("cloudA"))?;
    aggregator.trigger_subscribe(&measurements, "agg")?;

    // The station ingests measurements; every few readings the cloud-side
    // aggregator drains its trigger stream and publishes a mean into the
    // processed keygroup.
    let mut aggregates: u64 = 0;
    let mut window: Vec<u64> = Vec::new();
    let drain = |window: &mut Vec<u64>, aggregates: &mut u64| -> Result<(), HarnessError> {
        if window.is_empty() {
            return Ok(());
        }
        let mean = window.iter().sum::<u64>() / window.len() as u64;
        aggregator.put(&processed, &format!("sum{aggregates:02}"), value(mean))?;
        *aggregates += 1;
        window.clear();
        Ok(())
    };
    for i in 0..total {
        researcher.put(&measurements, &format!("m{i:02}"), value(i))?;
        cluster.run_for(150);
        for record in aggregator.trigger_poll(&measurements, "agg", 100)? {
            if let Some(v) = record.fields.get("v") {
                if let Ok(n) = String::from_utf8_lossy(v).parse::<u64>() {
                    window.push(n);
                }
            }
        }
        if window.len() >= 4 {
            drain(&mut window, &mut aggregates)?;
        }
    }
    cluster.run_for(500);
    for record in aggregator.trigger_poll(&measurements, "agg", 100)? {
        if let Some(v) = record.fields.get("v") {
            if let Ok(n) = String::from_utf8_lossy(v).parse::<u64>() {
                window.push(n);
            }
        }
    }
    drain(&mut window, &mut aggregates)?;

    // Settle replication, then outlive the station's buffer TTL.
    cluster.settle(250, 15_000, |c| c.converged(&processed) && c.converged(&measurements));
    cluster.run_for(ttl_ms + 1_500);

    let mut assertions = Vec::new();
    let processed_maps = cluster.record_maps(&processed);
    let uni = &processed_maps["uni"];
    let cloud_processed = &processed_maps["cloudA"];
    check(
        &mut assertions,
        "university holds all aggregated records",
        uni.len() as u64 == aggregates && uni == cloud_processed && aggregates > 0,
        format!(
            "uni has {}/{} aggregates; equal to cloud: {}",
            uni.len(),
            aggregates,
            uni == cloud_processed
        ),
    );

    let now = cluster.now();
    let station_stored = cluster.stored_records("station", &measurements);
    let sweep_lag = (ttl_ms.min(1_000) / 2).max(50) + 100;
    let stale = station_stored
        .iter()
        .filter(|s| now.saturating_sub(s.local_write_time) > ttl_ms + sweep_lag)
        .count();
    check(
        &mut assertions,
        "station buffers only records younger than its TTL",
        stale == 0 && (station_stored.len() as u64) < total,
        format!(
            "{} of {} raw measurements still buffered, {} older than ttl+sweep",
            station_stored.len(),
            total,
            stale
        ),
    );

    let cloud_raw = cluster.record_maps(&measurements)["cloudA"].clone();
    check(
        &mut assertions,
        "cloud persists every raw measurement",
        cloud_raw.len() as u64 == total,
        format!("cloud holds {}/{} measurements (TTL disabled there)", cloud_raw.len(), total),
    );

    let mut report = Report::new("research-station", cluster.spec.seed);
    report.push(Section::KeyValues {
        title: "Workload".into(),
        pairs: vec![
            ("measurements".into(), total.to_string()),
            ("aggregates".into(), aggregates.to_string()),
            ("station ttl (scaled)".into(), format!("{ttl_ms}ms")),
        ],
    });
    let mut loss = cluster.loss_accounting(&measurements);
    loss.extend(cluster.loss_accounting(&processed));
    report.push(Section::Loss(loss));
    finish(report, assertions)
}

fn carsharing(cluster: &Cluster) -> Result<Report, HarnessError> {
    let sensors = KeygroupName::parse("fleet.vehicle42.sensors").unwrap();
    let uploads = KeygroupName::parse("fleet.vehicle42.uploads").unwrap();
    let readings: u64 = 15;
    let ttl_ms: u64 = 3_000;

    let car = cluster.new_session("car", &cluster.first_machine("vehicle42"))?;
    let preprocessor = cluster.new_session("uploader", &cluster.first_machine("vehicle42"))?;
    let upload_session = cluster.new_session("uploader", &cluster.first_machine("buffer"))?;
    let manager = cluster.new_session("manager", &cluster.first_machine("fleet"))?;

    // The fleet-management side subscribes before any upload exists; the
    // in-vehicle preprocessor consumes the sensor stream.
    manager.trigger_subscribe(&uploads, "mgmt")?;
    preprocessor.trigger_subscribe(&sensors, "prep")?;

    let mut upload_count: u64 = 0;
    let mut pending: Vec<String> = Vec::new();
    for i in 0..readings {
        car.put(&sensors, &format!("r{i:02}"), value(i))?;
        cluster.run_for(150);
        for record in preprocessor.trigger_poll(&sensors, "prep", 100)? {
            pending.push(record.record_key.clone());
        }
        // A good uplink every third reading: compress and upload.
        if pending.len() >= 3 {
            upload_session.put(
                &uploads,
                &format!("up{upload_count:02}"),
                BTreeMap::from([("batch".to_string(), pending.join(",").into_bytes())]),
            )?;
            upload_count += 1;
            pending.clear();
        }
    }
    if !pending.is_empty() {
        upload_session.put(
            &uploads,
            &format!("up{upload_count:02}"),
            BTreeMap::from([("batch".to_string(), pending.join(",").into_bytes())]),
        )?;
        upload_count += 1;
    }
    cluster.settle(250, 15_000, |c| c.converged(&uploads));
    cluster.run_for(1_000);

    let mut assertions = Vec::new();
    let received = manager.trigger_poll(&uploads, "mgmt", 1_000)?;
    check(
        &mut assertions,
        "fleet management receives every upload",
        received.len() as u64 == upload_count && upload_count > 0,
        format!("trigger stream delivered {}/{} uploads", received.len(), upload_count),
    );
    let buffer_map = cluster.record_maps(&uploads)["buffer"].clone();
    check(
        &mut assertions,
        "buffer node stores every upload",
        buffer_map.len() as u64 == upload_count,
        format!("buffer holds {}/{} uploads", buffer_map.len(), upload_count),
    );
    // The vehicle retains readings only within its scaled 24h window.
    cluster.run_for(ttl_ms + 1_000);
    let now = cluster.now();
    let vehicle_stored = cluster.stored_records("vehicle42", &sensors);
    let sweep_lag = (ttl_ms.min(1_000) / 2).max(50) + 100;
    let stale = vehicle_stored
        .iter()
        .filter(|s| now.saturating_sub(s.local_write_time) > ttl_ms + sweep_lag)
        .count();
    check(
        &mut assertions,
        "vehicle buffers readings only for the scaled retention window",
        stale == 0,
        format!(
            "{} readings still buffered, {} beyond ttl+sweep",
            vehicle_stored.len(),
            stale
        ),
    );

    let mut report = Report::new("carsharing", cluster.spec.seed);
    report.push(Section::KeyValues {
        title: "Workload".into(),
        pairs: vec![
            ("sensor readings".into(), readings.to_string()),
            ("uploads".into(), upload_count.to_string()),
            ("vehicle ttl (scaled)".into(), format!("{ttl_ms}ms")),
        ],
    });
    let mut loss = cluster.loss_accounting(&sensors);
    loss.extend(cluster.loss_accounting(&uploads));
    report.push(Section::Loss(loss));
    finish(report, assertions)
}

fn mobile_migration(cluster: &Cluster) -> Result<Report, HarnessError> {
    let kg = KeygroupName::parse("mobileapp.alice.appdata").unwrap();
    let tower1 = EntityId::node("tower1").unwrap();
    let tower2 = EntityId::node("tower2").unwrap();
    let pre_moves: u64 = 8;
    let post_moves: u64 = 5;

    let alice = cluster.new_session("alice", &cluster.first_machine("tower1"))?;
    for i in 0..pre_moves {
        alice.put(&kg, &format!("d{i}"), value(i))?;
        cluster.run_for(50);
    }
    cluster.settle(250, 10_000, |c| c.converged(&kg));
    let before = alice.fetch_keygroup(&kg)?;

    // Tower 1 loses its naming-service connectivity right before the
    // movement: it keeps serving from its cache, keeps its subscription,
    // and never learns the rotated secret.
    cluster.net.set_fault_profile(Some(FaultProfile {
        partitions: vec![PartitionWindow {
            side_a: [cluster.first_machine("tower1")].into(),
            side_b: [fogrep_core::naming::server::NAMING_ENDPOINT.to_string()].into(),
            start_ms: cluster.now(),
            end_ms: u64::MAX,
        }],
        ..FaultProfile::faultless(cluster.spec.seed)
    }));

    // The client connected to tower 2: swap the replica (add before
    // remove).
    let after = alice.on_movement(&kg, &tower1, &tower2)?;
    cluster.run_for(3_000);

    let mut assertions = Vec::new();
    check(
        &mut assertions,
        "replica set swapped tower1 for tower2",
        after.is_replica(&tower2)
            && !after.is_replica(&tower1)
            && after.is_replica(&EntityId::node("cloudB").unwrap()),
        format!(
            "replicas now {:?}",
            after.replica_nodes.keys().map(|n| n.name().to_string()).collect::<Vec<_>>()
        ),
    );
    check(
        &mut assertions,
        "secret rotated exactly once",
        before.secret.version == 1 && after.secret.version == 2,
        format!("secret version {} -> {}", before.secret.version, after.secret.version),
    );

    // Tower 2 serves all records previously on tower 1 (pulled from the
    // lexicographically smallest remaining replica, the cloud).
    alice.set_target(fogrep_core::transport::Endpoint::named(cluster.first_machine("tower2")));
    let mut served = 0;
    for i in 0..pre_moves {
        if alice.get(&kg, &format!("d{i}"))?.is_some() {
            served += 1;
        }
    }
    check(
        &mut assertions,
        "tower2 serves all records previously on tower1",
        served == pre_moves,
        format!("{served}/{pre_moves} pre-movement records readable at tower2"),
    );

    // Post-rotation updates are published under the new secret; tower 1
    // still holds only the old one. Writes go through the cloud replica,
    // whose updates tower 1 is still subscribed to.
    alice.set_target(fogrep_core::transport::Endpoint::named(cluster.first_machine("cloudB")));
    for i in 0..post_moves {
        alice.put(&kg, &format!("post{i}"), value(i))?;
        cluster.run_for(100);
    }
    cluster.run_for(2_000);

    let decrypt_failures = cluster
        .events()
        .iter()
        .filter(|e| {
            matches!(
                e,
                DaemonEvent::DecryptFailed {
                    node,
                    keygroup,
                    reason: DecryptFailure::UnknownSecretVersion(_),
                    ..
                } if node == &tower1 && keygroup == &kg
            )
        })
        .count() as u64;
    check(
        &mut assertions,
        "tower1 fails to decrypt all post-rotation updates",
        decrypt_failures == post_moves,
        format!("{decrypt_failures}/{post_moves} post-rotation updates rejected at tower1"),
    );
    let tower1_map = cluster.daemon(&cluster.first_machine("tower1")).record_map(&kg);
    let tower2_map = cluster.daemon(&cluster.first_machine("tower2")).record_map(&kg);
    check(
        &mut assertions,
        "post-rotation records exist at tower2 but never at tower1",
        (0..post_moves).all(|i| tower2_map.contains_key(&format!("post{i}")))
            && (0..post_moves).all(|i| !tower1_map.contains_key(&format!("post{i}"))),
        format!("tower2 has {} records, tower1 has {}", tower2_map.len(), tower1_map.len()),
    );

    let mut report = Report::new("mobile-migration", cluster.spec.seed);
    report.push(Section::KeyValues {
        title: "Migration".into(),
        pairs: vec![
            ("pre-movement records".into(), pre_moves.to_string()),
            ("post-rotation records".into(), post_moves.to_string()),
            (
                "secret versions".into(),
                format!("{} -> {}", before.secret.version, after.secret.version),
            ),
            ("decrypt failures at tower1".into(), decrypt_failures.to_string()),
        ],
    });
    report.push(Section::Loss(cluster.loss_accounting(&kg)));
    finish(report, assertions)
}

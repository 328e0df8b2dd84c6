//! Micro-benchmark style measurements on a running cluster: data-centric
//! staleness between replicas, and the end-to-end versus storage-only
//! latency of client operations.

use std::collections::BTreeMap;

use fogrep_core::daemon::events::{ClientOpKind, DaemonEvent};
use fogrep_core::model::KeygroupName;

use crate::cluster::{Cluster, HarnessError};
use crate::stats::StatsTable;

fn fields_for(i: u64) -> BTreeMap<String, Vec<u8>> {
    BTreeMap::from([("v".to_string(), i.to_string().into_bytes())])
}

/// Performs `n_ops` puts and `n_ops` deletes at the keygroup's first
/// replica and measures, per operation, the time between the commit at
/// the origin and the apply at the second replica, on the shared virtual
/// clock. Returns one table with a put and a delete column.
pub fn measure_staleness(
    cluster: &Cluster,
    kg: &KeygroupName,
    n_ops: u64,
    pace_ms: u64,
) -> Result<StatsTable, HarnessError> {
    let kg_spec = cluster
        .spec
        .keygroups
        .iter()
        .find(|k| k.name == kg.rendered())
        .ok_or_else(|| HarnessError::Other(format!("keygroup {} not in spec", kg)))?;
    if kg_spec.replicas.len() < 2 {
        return Err(HarnessError::InsufficientReplicas);
    }
    let origin = kg_spec.replicas[0].node.clone();
    let second = kg_spec.replicas[1].node.clone();
    let client = kg_spec.clients.first().map(|s| s.as_str()).unwrap_or("admin");
    let session = cluster.new_session(client, &cluster.first_machine(&origin))?;

    let events_before = cluster.events().len();
    for i in 0..n_ops {
        session
            .put(kg, &format!("s{i}"), fields_for(i))
            .map_err(|e| HarnessError::Other(format!("staleness put: {e}")))?;
        cluster.run_for(pace_ms);
    }
    for i in 0..n_ops {
        session
            .delete(kg, &format!("s{i}"))
            .map_err(|e| HarnessError::Other(format!("staleness delete: {e}")))?;
        cluster.run_for(pace_ms);
    }
    // Let the tail applies land.
    cluster.run_for(2_000);

    let events = cluster.events();
    let events = &events[events_before..];
    let mut commits: BTreeMap<u64, (u64, bool)> = BTreeMap::new(); // counter -> (commit_ms, deleted)
    for event in events {
        if let DaemonEvent::WriteCommitted {
            node,
            keygroup,
            counter,
            commit_ms,
            deleted,
            ..
        } = event
        {
            if keygroup == kg && node.name() == origin {
                commits.insert(*counter, (*commit_ms, *deleted));
            }
        }
    }
    let mut put_samples = Vec::new();
    let mut delete_samples = Vec::new();
    for event in events {
        if let DaemonEvent::UpdateApplied {
            node,
            sender,
            keygroup,
            counter,
            apply_ms,
            ..
        } = event
        {
            if keygroup == kg && node.name() == second && sender.name() == origin {
                if let Some((commit_ms, deleted)) = commits.get(counter) {
                    let staleness = apply_ms.saturating_sub(*commit_ms) as f64;
                    if *deleted {
                        delete_samples.push(staleness);
                    } else {
                        put_samples.push(staleness);
                    }
                }
            }
        }
    }

    let mut table = StatsTable::new(format!("Staleness ({kg}, {origin} -> {second}), ms"));
    if !table.push_column("Put", &put_samples) || !table.push_column("Delete", &delete_samples) {
        return Err(HarnessError::Other("staleness produced no samples".into()));
    }
    Ok(table)
}

/// Times `n_ops` puts, reads and deletes end-to-end at the daemon API and
/// separately the inner storage call; returns (end-to-end, storage-only).
pub fn measure_latency_overhead(
    cluster: &Cluster,
    kg: &KeygroupName,
    n_ops: u64,
) -> Result<(StatsTable, StatsTable), HarnessError> {
    let kg_spec = cluster
        .spec
        .keygroups
        .iter()
        .find(|k| k.name == kg.rendered())
        .ok_or_else(|| HarnessError::Other(format!("keygroup {} not in spec", kg)))?;
    let origin = kg_spec.replicas[0].node.clone();
    let client = kg_spec.clients.first().map(|s| s.as_str()).unwrap_or("admin");
    let session = cluster.new_session(client, &cluster.first_machine(&origin))?;

    let events_before = cluster.events().len();
    for i in 0..n_ops {
        let key = format!("l{i}");
        session
            .put(kg, &key, fields_for(i))
            .map_err(|e| HarnessError::Other(format!("latency put: {e}")))?;
        session
            .get(kg, &key)
            .map_err(|e| HarnessError::Other(format!("latency get: {e}")))?;
        session
            .delete(kg, &key)
            .map_err(|e| HarnessError::Other(format!("latency delete: {e}")))?;
        cluster.run_for(1);
    }

    let mut end_to_end: BTreeMap<ClientOpKind, Vec<f64>> = BTreeMap::new();
    let mut storage_only: BTreeMap<ClientOpKind, Vec<f64>> = BTreeMap::new();
    let events = cluster.events();
    for event in &events[events_before..] {
        if let DaemonEvent::ClientOpServed {
            keygroup,
            op,
            start_ms,
            storage_start_ms,
            storage_end_ms,
            end_ms,
            ok: true,
            ..
        } = event
        {
            if keygroup != kg {
                continue;
            }
            end_to_end
                .entry(*op)
                .or_default()
                .push(end_ms.saturating_sub(*start_ms) as f64);
            storage_only
                .entry(*op)
                .or_default()
                .push(storage_end_ms.saturating_sub(*storage_start_ms) as f64);
        }
    }

    let label = |op: &ClientOpKind| match op {
        ClientOpKind::Put => "Put",
        ClientOpKind::Get => "Read",
        ClientOpKind::Delete => "Delete",
        ClientOpKind::TriggerPoll => "TriggerPoll",
    };
    let mut e2e_table = StatsTable::new(format!("End-to-end latency ({kg}), ms"));
    let mut storage_table = StatsTable::new(format!("Storage-only latency ({kg}), ms"));
    for op in [ClientOpKind::Put, ClientOpKind::Get, ClientOpKind::Delete] {
        let e2e = end_to_end.get(&op).cloned().unwrap_or_default();
        let st = storage_only.get(&op).cloned().unwrap_or_default();
        if !e2e_table.push_column(label(&op), &e2e) || !storage_table.push_column(label(&op), &st) {
            return Err(HarnessError::Other("latency measurement produced no samples".into()));
        }
    }
    Ok((e2e_table, storage_table))
}

//! Rendezvous assignment of remote nodes to local machines.
//!
//! Every machine of a node computes the same pure function over the same
//! inputs (the live machine list from shared storage plus the remote
//! member nodes of all local keygroups), so the machines agree on who
//! subscribes to whom without any coordination round.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::EntityId;

const RENDEZVOUS_CONTEXT: &[u8] = b"fog/rendezvous/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no live machines to assign responsibility to")]
pub struct NoLiveMachines;

fn score(machine: &EntityId, remote: &EntityId) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(RENDEZVOUS_CONTEXT);
    hasher.update(machine.name().as_bytes());
    hasher.update([0u8]);
    hasher.update(remote.name().as_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

/// Maps every remote node to the live machine maximizing
/// `hash(machine, remote)`; ties break on machine name so the map is a
/// pure function of its inputs.
pub fn assign(
    live_machines: &[EntityId],
    remote_nodes: &BTreeSet<EntityId>,
) -> Result<BTreeMap<EntityId, EntityId>, NoLiveMachines> {
    if live_machines.is_empty() {
        return Err(NoLiveMachines);
    }
    let mut map = BTreeMap::new();
    for remote in remote_nodes {
        let winner = live_machines
            .iter()
            .max_by_key(|m| (score(m, remote), m.name().to_string()))
            .expect("nonempty machine list");
        map.insert(remote.clone(), winner.clone());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn machine(n: &str) -> EntityId {
        EntityId::machine(n).unwrap()
    }

    fn node(n: &str) -> EntityId {
        EntityId::node(n).unwrap()
    }

    #[test]
    fn single_machine_owns_everything() {
        let live = vec![machine("m1")];
        let remotes: BTreeSet<_> = ["r1", "r2", "r3"].into_iter().map(node).collect();
        let map = assign(&live, &remotes).unwrap();
        assert_eq!(map.len(), 3);
        assert!(map.values().all(|m| m == &machine("m1")));
    }

    #[test]
    fn crash_leaves_no_remote_unassigned() {
        let live = vec![machine("m1"), machine("m2")];
        let remotes: BTreeSet<_> = (0..8).map(|i| node(&format!("r{i}"))).collect();
        let before = assign(&live, &remotes).unwrap();
        // m2 crashes: the survivor owns everything; assignments m1 already
        // held do not move.
        let after = assign(&[machine("m1")], &remotes).unwrap();
        assert_eq!(after.len(), remotes.len());
        assert!(after.values().all(|m| m == &machine("m1")));
        for (remote, owner) in &before {
            if owner == &machine("m1") {
                assert_eq!(&after[remote], owner);
            }
        }
    }

    #[test]
    fn identical_inputs_give_identical_maps_on_every_machine() {
        // Each machine computes the map independently; cross-check.
        let live = vec![machine("m1"), machine("m2"), machine("m3")];
        let remotes: BTreeSet<_> = (0..16).map(|i| node(&format!("node{i:02}"))).collect();
        let computed_on_m1 = assign(&live, &remotes).unwrap();
        let computed_on_m2 = assign(&live, &remotes).unwrap();
        let computed_on_m3 = assign(&live, &remotes).unwrap();
        assert_eq!(computed_on_m1, computed_on_m2);
        assert_eq!(computed_on_m2, computed_on_m3);
    }

    #[test]
    fn no_machines_is_an_error() {
        let remotes: BTreeSet<_> = [node("r1")].into();
        assert_eq!(assign(&[], &remotes), Err(NoLiveMachines));
    }

    #[test]
    fn assignment_spreads_across_machines() {
        let live = vec![machine("m1"), machine("m2"), machine("m3"), machine("m4")];
        let remotes: BTreeSet<_> = (0..64).map(|i| node(&format!("r{i:02}"))).collect();
        let map = assign(&live, &remotes).unwrap();
        let mut counts: BTreeMap<&EntityId, usize> = BTreeMap::new();
        for owner in map.values() {
            *counts.entry(owner).or_default() += 1;
        }
        assert_eq!(counts.len(), 4, "all machines get some share");
    }
}

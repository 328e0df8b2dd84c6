//! Convergence-under-faults trials: a replicated keygroup, a mixed
//! put/delete workload from one writer, a faulty transport, then
//! quiescence plus recovery, ending in a verdict over record-map equality
//! and loss accounting. One trial is fully determined by its seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use fogrep_core::model::KeygroupName;

use crate::cluster::{Cluster, HarnessError, LossLine};
use crate::spec::ClusterSpec;

#[derive(Debug, Clone)]
pub struct ConvergenceParams {
    pub replicas: usize,
    pub ops: u64,
    pub key_space: u64,
    pub delete_ratio: f64,
    pub pace_ms: u64,
    pub drop: f64,
    pub reorder: f64,
    pub delay_ms: (u64, u64),
    /// One partition window relative to fault activation; the last listed
    /// node is isolated from the others.
    pub partition: Option<(u64, u64)>,
    pub buffer: usize,
    pub settle_max_ms: u64,
}

impl Default for ConvergenceParams {
    fn default() -> Self {
        ConvergenceParams {
            replicas: 3,
            ops: 200,
            key_space: 24,
            delete_ratio: 0.3,
            pace_ms: 50,
            drop: 0.2,
            reorder: 0.1,
            delay_ms: (1, 15),
            partition: Some((2_000, 4_000)),
            buffer: 64,
            settle_max_ms: 60_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceOutcome {
    pub seed: u64,
    pub converged: bool,
    pub identical_maps: bool,
    pub lost: u64,
    pub pending: u64,
    pub acked_ops: u64,
    pub virtual_ms: u64,
    pub loss_lines: Vec<LossLine>,
    pub detail: String,
}

impl ConvergenceOutcome {
    pub fn passed(&self) -> bool {
        self.converged && self.identical_maps && self.lost == 0 && self.pending == 0
    }
}

fn node_name(i: usize) -> String {
    format!("rep{i}")
}

/// Builds the trial spec: N single-machine replica nodes of one keygroup
/// with TTL disabled everywhere, one writer client, and the fault profile
/// from the parameters.
pub fn trial_spec(seed: u64, params: &ConvergenceParams) -> ClusterSpec {
    let mut text = format!("seed = {seed}\nclients = [\"writer\"]\n");
    for i in 0..params.replicas {
        text.push_str(&format!(
            "[[node]]\nname = \"{}\"\nlocation = [{}.0, {}.0]\n",
            node_name(i),
            i,
            i
        ));
    }
    text.push_str("[[keygroup]]\nname = \"conv.trial\"\nreplicas = [");
    for i in 0..params.replicas {
        if i > 0 {
            text.push_str(", ");
        }
        text.push_str(&format!("{{ node = \"{}\", ttl = \"disabled\" }}", node_name(i)));
    }
    text.push_str("]\nclients = [\"writer\"]\n");
    text.push_str(&format!(
        "[faults]\ndrop = {}\nreorder = {}\ndelay = {{ uniform = [{}, {}] }}\n",
        params.drop, params.reorder, params.delay_ms.0, params.delay_ms.1
    ));
    if let Some((start, end)) = params.partition {
        let isolated = node_name(params.replicas - 1);
        let others: Vec<String> = (0..params.replicas - 1).map(|i| format!("\"{}\"", node_name(i))).collect();
        text.push_str(&format!(
            "[[faults.partition]]\na = [\"{isolated}\"]\nb = [{}]\nstart = {start}\nend = {end}\n",
            others.join(", ")
        ));
    }
    text.push_str(&format!("[params]\nbuffer = {}\n", params.buffer));
    ClusterSpec::from_toml(&text).expect("trial spec is well-formed")
}

/// Runs one seeded trial end to end and reports the verdict.
pub fn run_trial(seed: u64, params: &ConvergenceParams) -> Result<ConvergenceOutcome, HarnessError> {
    let spec = trial_spec(seed, params);
    let cluster = Cluster::build(spec)?;
    let kg = KeygroupName::parse("conv.trial").unwrap();
    // A short request timeout keeps writer retries cheap in virtual time;
    // the writer's own link shares the faulty transport.
    let writer = cluster.new_session_with_timeout("writer", &cluster.first_machine(&node_name(0)), 200)?;

    cluster.enable_faults();
    let mut workload = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let mut acked: u64 = 0;
    let mut live_keys: Vec<u64> = Vec::new();
    while acked < params.ops {
        let key_index = workload.gen_range(0..params.key_space);
        let key = format!("k{key_index:02}");
        let deleting = workload.gen::<f64>() < params.delete_ratio && live_keys.contains(&key_index);
        // The writer's own link is subject to the fault profile too;
        // retry until the daemon acknowledges.
        let mut attempts = 0;
        loop {
            let result = if deleting {
                writer.delete(&kg, &key).map(|_| ())
            } else {
                writer
                    .put(
                        &kg,
                        &key,
                        BTreeMap::from([("v".to_string(), format!("{acked}").into_bytes())]),
                    )
                    .map(|_| ())
            };
            match result {
                Ok(()) => break,
                Err(_) if attempts < 50 => {
                    attempts += 1;
                    cluster.run_for(20);
                }
                Err(e) => {
                    return Err(HarnessError::Other(format!(
                        "seed {seed}: writer failed permanently after {attempts} attempts: {e}"
                    )))
                }
            }
        }
        if deleting {
            live_keys.retain(|k| *k != key_index);
        } else if !live_keys.contains(&key_index) {
            live_keys.push(key_index);
        }
        acked += 1;
        cluster.run_for(params.pace_ms);
    }

    // Quiescence plus recovery: probes reveal tail losses, gap recovery
    // drains the pending sets, and the replicas converge.
    let converged = cluster.settle(500, params.settle_max_ms, |c| c.converged(&kg));
    let maps = cluster.record_maps(&kg);
    let mut values = maps.values();
    let reference = values.next().cloned().unwrap_or_default();
    let identical_maps = maps.values().all(|m| *m == reference);
    let loss_lines = cluster.loss_accounting(&kg);
    let lost: u64 = loss_lines.iter().map(|l| l.lost).sum();
    let pending: u64 = loss_lines.iter().map(|l| l.pending).sum();
    let detail = if converged && identical_maps {
        format!("{} keys converged identically on {} replicas", reference.len(), maps.len())
    } else {
        let sizes: Vec<String> = maps.iter().map(|(n, m)| format!("{n}:{}", m.len())).collect();
        format!("map sizes {}; lost={lost} pending={pending}", sizes.join(" "))
    };
    Ok(ConvergenceOutcome {
        seed,
        converged,
        identical_maps,
        lost,
        pending,
        acked_ops: acked,
        virtual_ms: cluster.now(),
        loss_lines,
        detail,
    })
}

/// Runs trials across a seed range. With the `parallel` feature the
/// trials fan out over a worker pool (each trial owns its private world,
/// so trials are embarrassingly parallel); otherwise they run in order.
/// Output order is by seed either way.
pub fn sweep(seeds: std::ops::Range<u64>, params: &ConvergenceParams) -> Vec<ConvergenceOutcome> {
    run_seeds(seeds, params)
}

#[cfg(feature = "parallel")]
fn run_seeds(seeds: std::ops::Range<u64>, params: &ConvergenceParams) -> Vec<ConvergenceOutcome> {
    use rayon::prelude::*;
    let mut outcomes: Vec<ConvergenceOutcome> = seeds
        .collect::<Vec<u64>>()
        .par_iter()
        .map(|seed| {
            run_trial(*seed, params).unwrap_or_else(|e| ConvergenceOutcome {
                seed: *seed,
                converged: false,
                identical_maps: false,
                lost: 0,
                pending: 0,
                acked_ops: 0,
                virtual_ms: 0,
                loss_lines: Vec::new(),
                detail: format!("trial error: {e}"),
            })
        })
        .collect();
    outcomes.sort_by_key(|o| o.seed);
    outcomes
}

#[cfg(not(feature = "parallel"))]
fn run_seeds(seeds: std::ops::Range<u64>, params: &ConvergenceParams) -> Vec<ConvergenceOutcome> {
    seeds
        .map(|seed| {
            run_trial(seed, params).unwrap_or_else(|e| ConvergenceOutcome {
                seed,
                converged: false,
                identical_maps: false,
                lost: 0,
                pending: 0,
                acked_ops: 0,
                virtual_ms: 0,
                loss_lines: Vec::new(),
                detail: format!("trial error: {e}"),
            })
        })
        .collect()
}

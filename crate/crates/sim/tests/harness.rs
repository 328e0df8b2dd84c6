//! Harness-level integration: cluster building, convergence trials,
//! measurements and report determinism.

use fogrep_sim::cluster::Cluster;
use fogrep_sim::convergence::{run_trial, ConvergenceParams};
use fogrep_sim::spec::ClusterSpec;

#[test]
fn convergence_trial_smoke() {
    let params = ConvergenceParams {
        ops: 30,
        pace_ms: 40,
        ..ConvergenceParams::default()
    };
    let outcome = run_trial(7, &params).unwrap();
    assert!(outcome.passed(), "outcome: {outcome:?}");
    assert_eq!(outcome.acked_ops, 30);
}

#[test]
fn build_rejects_keygroup_with_unknown_node() {
    let text = r#"
seed = 1
[[node]]
name = "a"
location = [0.0, 0.0]
[[keygroup]]
name = "x.y"
replicas = [ { node = "ghost" } ]
"#;
    assert!(ClusterSpec::from_toml(text).is_err());
}

#[test]
fn two_nodes_one_keygroup_builds_with_verified_subscriptions() {
    let text = r#"
seed = 3
[[node]]
name = "a"
location = [0.0, 0.0]
[[node]]
name = "b"
location = [1.0, 1.0]
[[keygroup]]
name = "x.y"
replicas = [ { node = "a" }, { node = "b" } ]
"#;
    let spec = ClusterSpec::from_toml(text).unwrap();
    let cluster = Cluster::build(spec).unwrap();
    let kg = fogrep_core::model::KeygroupName::parse("x.y").unwrap();
    assert!(cluster.daemons["a-m1"].subscribed_keygroups().contains(&kg));
    assert!(cluster.daemons["b-m1"].subscribed_keygroups().contains(&kg));
}

#[test]
fn scenarios_pass_their_postconditions() {
    for kind in fogrep_sim::scenario::ScenarioKind::all() {
        let start = std::time::Instant::now();
        let report = fogrep_sim::scenario::run(kind, 11).unwrap_or_else(|e| panic!("{}: {e}", kind.name()));
        assert!(report.first_failure().is_none(), "{}: {:?}", kind.name(), report.first_failure());
        assert!(start.elapsed().as_secs() < 10, "{} took too long", kind.name());
    }
}

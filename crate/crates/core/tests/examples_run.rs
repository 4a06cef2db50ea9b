//! Every example runs end to end with a small replication count.

#[allow(dead_code)]
#[path = "../examples/branching_property.rs"]
mod branching_property;
#[allow(dead_code)]
#[path = "../examples/coupling_ladder.rs"]
mod coupling_ladder;
#[allow(dead_code)]
#[path = "../examples/dpp_inequalities.rs"]
mod dpp_inequalities;
#[allow(dead_code)]
#[path = "../examples/dynkin_residual.rs"]
mod dynkin_residual;
#[allow(dead_code)]
#[path = "../examples/extinction_oracle.rs"]
mod extinction_oracle;
#[allow(dead_code)]
#[path = "../examples/feedback_policy.rs"]
mod feedback_policy;
#[allow(dead_code)]
#[path = "../examples/moment_bound.rs"]
mod moment_bound;
#[allow(dead_code)]
#[path = "../examples/run_experiment.rs"]
mod run_experiment;

#[test]
fn extinction_oracle_runs() {
    let (exact, mc, pde) = extinction_oracle::run_example(2_000).unwrap();
    assert!((mc - exact).abs() < 0.05);
    assert!((pde - exact).abs() < 1e-3);
}

#[test]
fn feedback_policy_runs() {
    assert!(!feedback_policy::run_example().unwrap().is_empty());
}

#[test]
fn branching_property_runs() {
    branching_property::run_example(500).unwrap();
}

#[test]
fn dynkin_residual_runs() {
    assert!(!dynkin_residual::run_example(200).unwrap().is_empty());
}

#[test]
fn dpp_inequalities_runs() {
    assert!(!dpp_inequalities::run_example(500).unwrap().is_empty());
}

#[test]
fn coupling_ladder_runs() {
    assert_eq!(coupling_ladder::run_example(500).unwrap().len(), 3);
}

#[test]
fn moment_bound_runs() {
    for r in moment_bound::run_example(500).unwrap() {
        assert!(r.pass);
    }
}

#[test]
fn run_experiment_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment::run_example("extinction.toml", dir.path(), Some(2_000)).unwrap();
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("summary.csv").exists());
}

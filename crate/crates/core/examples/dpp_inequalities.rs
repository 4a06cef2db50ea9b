//! Dynamic programming checks: every policy stays above the value up to a
//! stopping time, and the feedback policy attains it.

use std::sync::Arc;

use branchctl::estimator::{dpp_check, DppReport};
use branchctl::{
    extract_feedback, solve, BoundaryRule, GridConfig, McConfig, ModelParams, Policy, Population,
    SimConfig, StoppingRule,
};

pub fn run_example(reps: usize) -> Result<Vec<DppReport>, Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/models/two_control.toml");
    let model = ModelParams::load(path.as_ref())?;
    let horizon = 1.0;
    let grid = GridConfig::with_cfl(&model, -5.0, 5.0, 201, horizon, BoundaryRule::OneSided)?;
    let u = Arc::new(solve(&model, &grid)?);
    let policies = [
        extract_feedback(u.clone()),
        Policy::Constant(0),
        Policy::Constant(1),
    ];
    let mu = Population::single(vec![0.4]);
    let mc = McConfig::new(reps, 9, SimConfig::new(0.01, horizon));
    let mut out = Vec::new();
    for p in &policies {
        for tau in [
            StoppingRule::Fixed(0.5),
            StoppingRule::FirstEventOr(horizon),
        ] {
            let r = dpp_check(0.0, &mu, p, &model, tau, &u, &mc, 0.01)?;
            println!(
                "{:<12} {:<28} slack {:+.5} (band {:.5})",
                r.policy,
                format!("{tau:?}"),
                r.slack,
                r.band
            );
            out.push(r);
        }
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example(20_000).map(|_| ())
}

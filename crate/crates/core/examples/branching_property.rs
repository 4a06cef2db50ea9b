//! The value of a two-particle start against the product of single-particle
//! values under the solver's feedback policy.

use std::sync::Arc;

use branchctl::estimator::{check_branching, BranchingReport};
use branchctl::{
    extract_feedback, solve, BoundaryRule, GridConfig, McConfig, ModelParams, SimConfig,
};

pub fn run_example(reps: usize) -> Result<BranchingReport, Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/models/critical_drift.toml");
    let model = ModelParams::load(path.as_ref())?;
    let horizon = 1.0;
    let grid = GridConfig::with_cfl(&model, -5.0, 5.0, 201, horizon, BoundaryRule::OneSided)?;
    let policy = extract_feedback(Arc::new(solve(&model, &grid)?));

    let mc = McConfig::new(reps, 100, SimConfig::new(0.01, horizon));
    let r = check_branching(0.0, &[vec![-0.4], vec![0.7]], &policy, &model, &mc)?;
    println!(
        "v(mu)          {:.5} +- {:.5}",
        r.multi.mean, r.multi.stderr
    );
    for (k, s) in r.singles.iter().enumerate() {
        println!("v(x{k})          {:.5} +- {:.5}", s.mean, s.stderr);
    }
    println!("product        {:.5} +- {:.5}", r.product, r.product_stderr);
    println!(
        "|difference|   {:.5} (band {:.5}) -> {}",
        r.difference,
        r.band,
        if r.pass { "ok" } else { "outside band" }
    );
    Ok(r)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example(20_000).map(|_| ())
}

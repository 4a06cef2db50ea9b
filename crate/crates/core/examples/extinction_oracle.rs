//! Critical binary branching without motion: the Monte Carlo extinction
//! frequency and the HJB grid both against q(T) = T / (2 + T).

use branchctl::{
    estimate_value, solve, BoundaryRule, GridConfig, McConfig, ModelParams, Policy, Population,
    SimConfig,
};

pub fn run_example(reps: usize) -> Result<(f64, f64, f64), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/models/critical_binary.toml");
    let model = ModelParams::load(path.as_ref())?;
    let horizon = 2.0;
    let exact = horizon / (2.0 + horizon);

    let mc = McConfig::new(reps, 1, SimConfig::new(0.1, horizon));
    let est = estimate_value(
        0.0,
        &Population::single(vec![0.0]),
        &Policy::Constant(0),
        &model,
        &mc,
    )?;

    let grid = GridConfig::new(-1.0, 1.0, 11, 4000, horizon, BoundaryRule::OneSided)?;
    let u = solve(&model, &grid)?;
    let pde = u.evaluate(0.0, 0.0)?;

    println!("exact      {exact:.6}");
    println!(
        "monte carlo {:.6} +- {:.6} ({} paths)",
        est.mean, est.stderr, est.n
    );
    println!("hjb grid   {pde:.6}");
    Ok((exact, est.mean, pde))
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example(100_000).map(|_| ())
}

//! Solves the HJB equation for the two-control model and prints where the
//! feedback rule switches control.

use std::sync::Arc;

use branchctl::labels::Label;
use branchctl::{extract_feedback, solve, BoundaryRule, GridConfig, ModelParams, Policy};

pub fn run_example() -> Result<Vec<(f64, usize)>, Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/models/two_control.toml");
    let model = ModelParams::load(path.as_ref())?;
    let grid = GridConfig::with_cfl(&model, -5.0, 5.0, 201, 1.0, BoundaryRule::OneSided)?;
    println!("n_t = {} (smallest CFL-satisfying)", grid.n_t);
    let u = Arc::new(solve(&model, &grid)?);
    println!("clamped nodes: {}", u.clamp_count());

    let policy = extract_feedback(u.clone());
    assert!(matches!(policy, Policy::FeedbackGrid(_)));
    let mut map = Vec::new();
    for k in 0..=20 {
        let x = -2.0 + 0.2 * k as f64;
        let a = policy.control(0.0, &[x], &Label::root());
        println!(
            "x = {x:+.1}  u(0, x) = {:.4}  control {a}",
            u.evaluate(0.0, x)?
        );
        map.push((x, a));
    }
    Ok(map)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example().map(|_| ())
}

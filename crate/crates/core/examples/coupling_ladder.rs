//! Runs the subcritical model against shrinking perturbations of itself on
//! shared randomness and reports how often the two systems stay together.

use branchctl::estimator::{coupling_success, CouplingReport};
use branchctl::{McConfig, ModelParams, Policy, Population, SimConfig};

pub fn run_example(reps: usize) -> Result<Vec<CouplingReport>, Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/models/subcritical.toml");
    let model = ModelParams::load(path.as_ref())?;
    let mu = Population::single(vec![0.0]);
    let mc = McConfig::new(reps, 3, SimConfig::new(0.01, 1.0));
    let mut out = Vec::new();
    for eps in [0.1, 0.01, 0.001] {
        let tilde = model.perturbed(eps)?;
        let r = coupling_success(0.0, &mu, &Policy::Constant(0), &model, &tilde, 0.05, &mc)?;
        println!(
            "eps {eps:<6} distance {:.5}  success {:.4} +- {:.4}",
            model.perturbation_distance(&tilde).unwrap_or(f64::NAN),
            r.rate,
            r.stderr
        );
        out.push(r);
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example(10_000).map(|_| ())
}

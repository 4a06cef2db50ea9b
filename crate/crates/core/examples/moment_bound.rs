//! Mean of the running maximum of the population size against
//! |V| exp(gamma_bar M (T - t)) for the bundled models.

use branchctl::estimator::{moment_check, replication_summaries, MomentReport};
use branchctl::{McConfig, ModelParams, Policy, Population, SimConfig};

pub fn run_example(reps: usize) -> Result<Vec<MomentReport>, Box<dyn std::error::Error>> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/models");
    let mut out = Vec::new();
    for (file, horizon) in [
        ("critical_binary", 2.0),
        ("subcritical", 1.0),
        ("supercritical", 1.0),
    ] {
        let model = ModelParams::load(format!("{dir}/{file}.toml").as_ref())?;
        let mu = Population::single(vec![0.0]);
        let mc = McConfig::new(reps, 17, SimConfig::new(0.05, horizon));
        let s = replication_summaries(0.0, &mu, &Policy::Constant(0), &model, &mc)?;
        let r = moment_check(&s, &model, 1, 0.0, horizon, mc.seed_base)?;
        println!(
            "{file:<16} E[sup N] = {:.4} +- {:.4}   bound {:.4}",
            r.sup_population.mean, r.sup_population.stderr, r.bound
        );
        out.push(r);
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example(10_000).map(|_| ())
}

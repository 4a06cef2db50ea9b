//! Monte Carlo estimators and the numerical checks built on them.
//!
//! Every estimator fans replications out over rayon with seed
//! `seed_base + r` for replication `r`, collects the results in replication
//! order and reduces them with pairwise summation, so the output depends only
//! on the inputs and the seed base.

use std::f64::consts::E;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hjb::{control_term, HjbError, ValueGrid};
use crate::labels::Population;
use crate::model::ModelParams;
use crate::policy::Policy;
use crate::simulator::{
    pathwise_cost, simulate, simulate_coupled, simulate_observed, PathObserver, ReplicationSummary,
    SimConfig, SimError, StepContext, StopRule,
};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("replication aborted after {completed} of {requested} completed: {source}")]
    Simulation {
        completed: usize,
        requested: usize,
        #[source]
        source: SimError,
    },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Grid(#[from] HjbError),
}

/// Replication count, seed base and per-path simulation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct McConfig {
    pub reps: usize,
    pub seed_base: u64,
    pub sim: SimConfig,
}

impl McConfig {
    pub fn new(reps: usize, seed_base: u64, sim: SimConfig) -> Self {
        McConfig {
            reps,
            seed_base,
            sim,
        }
    }

    pub fn seed(&self, r: usize) -> u64 {
        self.seed_base.wrapping_add(r as u64)
    }

    /// Same settings with a different seed base.
    pub fn reseeded(&self, seed_base: u64) -> Self {
        McConfig {
            seed_base,
            ..self.clone()
        }
    }
}

/// Sample mean with standard error `s / sqrt(n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed_base: u64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64], seed_base: u64) -> Self {
        let n = samples.len();
        // shifting by the first sample keeps constant data exact
        let shift = samples.first().copied().unwrap_or(0.0);
        let centred: Vec<f64> = samples.iter().map(|v| v - shift).collect();
        let mean = shift + pairwise_sum(&centred) / n as f64;
        let stderr = if n > 1 {
            let sq: Vec<f64> = samples.iter().map(|v| (v - mean) * (v - mean)).collect();
            (pairwise_sum(&sq) / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr,
            n,
            seed_base,
        }
    }

    /// `|mean - target| <= 3 stderr + allowance`.
    pub fn within(&self, target: f64, allowance: f64) -> bool {
        (self.mean - target).abs() <= 3.0 * self.stderr + allowance
    }
}

/// Sum with O(log n) error growth, independent of thread scheduling.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let (a, b) = values.split_at(values.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Runs `f(seed)` for every replication in parallel, in replication order.
/// The first failing replication (by index) aborts the batch.
pub fn replicate<T, F>(mc: &McConfig, f: F) -> Result<Vec<T>, EstimatorError>
where
    T: Send,
    F: Fn(u64) -> Result<T, SimError> + Sync,
{
    let results: Vec<Result<T, SimError>> = (0..mc.reps)
        .into_par_iter()
        .map(|r| f(mc.seed(r)))
        .collect();
    let completed = results.iter().filter(|r| r.is_ok()).count();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(source) => {
                return Err(EstimatorError::Simulation {
                    completed,
                    requested: mc.reps,
                    source,
                })
            }
        }
    }
    Ok(out)
}

fn require_reps(mc: &McConfig, min: usize) -> Result<(), EstimatorError> {
    if mc.reps < min {
        return Err(EstimatorError::Precondition(format!(
            "need at least {min} replications, got {}",
            mc.reps
        )));
    }
    Ok(())
}

/// Monte Carlo estimate of `J(t, mu, policy)`.
pub fn estimate_value(
    t: f64,
    mu: &Population,
    policy: &Policy,
    params: &ModelParams,
    mc: &McConfig,
) -> Result<Estimate, EstimatorError> {
    require_reps(mc, 2)?;
    let costs = replicate(mc, |seed| {
        simulate(t, mu, policy, params, &mc.sim, seed).map(|p| pathwise_cost(&p, params))
    })?;
    Ok(Estimate::from_samples(&costs, mc.seed_base))
}

/// Per-replication summaries (cost, sup N, event count, extinction).
pub fn replication_summaries(
    t: f64,
    mu: &Population,
    policy: &Policy,
    params: &ModelParams,
    mc: &McConfig,
) -> Result<Vec<ReplicationSummary>, EstimatorError> {
    replicate(mc, |seed| {
        simulate(t, mu, policy, params, &mc.sim, seed).map(|p| p.summary(params))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BranchingReport {
    pub multi: Estimate,
    pub singles: Vec<Estimate>,
    pub product: f64,
    /// Delta-method standard error of the product of the single estimates.
    pub product_stderr: f64,
    pub difference: f64,
    pub band: f64,
    pub pass: bool,
}

/// Compares the multi-particle value with the product of single-particle
/// values. Single `k` uses seed base `seed_base + (k + 1) reps`.
pub fn check_branching(
    t: f64,
    positions: &[Vec<f64>],
    policy: &Policy,
    params: &ModelParams,
    mc: &McConfig,
) -> Result<BranchingReport, EstimatorError> {
    if positions.is_empty() {
        return Err(EstimatorError::Precondition("no starting positions".into()));
    }
    if !policy.is_label_independent() {
        return Err(EstimatorError::Precondition(
            "the branching check needs a label-independent policy".into(),
        ));
    }
    let multi_mu = if positions.len() == 1 {
        Population::single(positions[0].clone())
    } else {
        Population::siblings(positions.iter().cloned())
    };
    let multi = estimate_value(t, &multi_mu, policy, params, mc)?;
    let singles = if positions.len() == 1 {
        vec![multi]
    } else {
        let mut singles = Vec::with_capacity(positions.len());
        for (k, x) in positions.iter().enumerate() {
            let base = mc.seed_base.wrapping_add(((k + 1) * mc.reps) as u64);
            let mu = Population::single(x.clone());
            singles.push(estimate_value(t, &mu, policy, params, &mc.reseeded(base))?);
        }
        singles
    };
    let product: f64 = singles.iter().map(|e| e.mean).product();
    let mut var = 0.0;
    for k in 0..singles.len() {
        let others: f64 = singles
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(_, e)| e.mean)
            .product();
        var += (others * singles[k].stderr).powi(2);
    }
    let product_stderr = if positions.len() == 1 {
        0.0
    } else {
        var.sqrt()
    };
    let difference = if positions.len() == 1 {
        0.0
    } else {
        (multi.mean - product).abs()
    };
    let band = if positions.len() == 1 {
        0.0
    } else {
        3.0 * (multi.stderr.powi(2) + product_stderr.powi(2)).sqrt()
    };
    Ok(BranchingReport {
        multi,
        singles,
        product,
        product_stderr,
        difference,
        band,
        pass: difference <= band,
    })
}

/// Smooth bounded test functions valued in `[0, 1]`:
/// `u(t, x) = level + amplitude e^{-decay t} F(|x - center|^2 / width^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TestFunction {
    Constant {
        value: f64,
    },
    /// `F(q) = e^{-q/2}`.
    GaussianBump {
        level: f64,
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
        decay: f64,
    },
    /// `F(q) = (e/2) q e^{-q/2}`, peaking at 1 on the sphere `q = 2`.
    PolyBump {
        level: f64,
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
        decay: f64,
    },
}

/// `u`, `d/dt u`, gradient and row-major Hessian at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub u: f64,
    pub dt: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl TestFunction {
    /// Checks the range condition: `u` stays in `[0, 1]` for `t >= 0`.
    pub fn check(&self, dim: usize) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::Precondition(format!("test function: {m}")));
        match self {
            TestFunction::Constant { value } => {
                if !(0.0..=1.0).contains(value) {
                    return bad("constant outside [0, 1]");
                }
            }
            TestFunction::GaussianBump {
                level,
                amplitude,
                center,
                width,
                decay,
            }
            | TestFunction::PolyBump {
                level,
                amplitude,
                center,
                width,
                decay,
            } => {
                if center.len() != dim {
                    return bad("center has the wrong dimension");
                }
                if !(*width > 0.0 && *decay >= 0.0) {
                    return bad("width must be positive and decay nonnegative");
                }
                let (lo, hi) = (level + amplitude.min(0.0), level + amplitude.max(0.0));
                if lo < 0.0 || hi > 1.0 {
                    return bad("values leave [0, 1]");
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            TestFunction::Constant { value } => *value,
            _ => self.jet(t, x).u,
        }
    }

    pub fn jet(&self, t: f64, x: &[f64]) -> Jet {
        let d = x.len();
        let (level, amplitude, center, width, decay, poly) = match self {
            TestFunction::Constant { value } => {
                return Jet {
                    u: *value,
                    dt: 0.0,
                    grad: vec![0.0; d],
                    hess: vec![0.0; d * d],
                }
            }
            TestFunction::GaussianBump {
                level,
                amplitude,
                center,
                width,
                decay,
            } => (level, amplitude, center, width, decay, false),
            TestFunction::PolyBump {
                level,
                amplitude,
                center,
                width,
                decay,
            } => (level, amplitude, center, width, decay, true),
        };
        let w2 = width * width;
        let y: Vec<f64> = x.iter().zip(center).map(|(xi, ci)| xi - ci).collect();
        let q = y.iter().map(|v| v * v).sum::<f64>() / w2;
        let e = (-q / 2.0).exp();
        let (f, f1, f2) = if poly {
            let k = E / 2.0;
            (k * q * e, k * (1.0 - q / 2.0) * e, k * (q / 4.0 - 1.0) * e)
        } else {
            (e, -0.5 * e, 0.25 * e)
        };
        let amp = amplitude * (-decay * t).exp();
        let grad = y.iter().map(|yi| amp * f1 * 2.0 * yi / w2).collect();
        let mut hess = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let diag = if i == j { f1 * 2.0 / w2 } else { 0.0 };
                hess[i * d + j] = amp * (f2 * 4.0 * y[i] * y[j] / (w2 * w2) + diag);
            }
        }
        Jet {
            u: level + amp * f,
            dt: -decay * amp * f,
            grad,
            hess,
        }
    }
}

/// Integrates `Gamma_s sum_i (d_t u + G^a u - c^a u)(X^i) prod_{j != i} u(X^j) ds`
/// with the left-endpoint rule on the simulator's step mesh.
struct DynkinIntegrator<'a> {
    u: &'a TestFunction,
    params: &'a ModelParams,
    integral: f64,
    jets: Vec<Jet>,
    suffix: Vec<f64>,
}

impl PathObserver for DynkinIntegrator<'_> {
    fn on_step(&mut self, ctx: &StepContext<'_>) {
        let n = ctx.particles.len();
        self.jets.clear();
        for p in ctx.particles {
            self.jets.push(self.u.jet(ctx.time, p.position()));
        }
        self.suffix.clear();
        self.suffix.resize(n + 1, 1.0);
        for i in (0..n).rev() {
            self.suffix[i] = self.suffix[i + 1] * self.jets[i].u;
        }
        let mut prefix = 1.0;
        let mut sum = 0.0;
        for (i, p) in ctx.particles.iter().enumerate() {
            let jet = &self.jets[i];
            let local = jet.dt
                + control_term(
                    self.params,
                    p.position(),
                    ctx.controls[i],
                    jet.u,
                    &jet.grad,
                    &jet.hess,
                );
            sum += local * prefix * self.suffix[i + 1];
            prefix *= jet.u;
        }
        self.integral += ctx.discount * sum * ctx.dt;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DynkinReport {
    pub residual: Estimate,
    /// `C h`.
    pub allowance: f64,
    pub band: f64,
    pub pass: bool,
}

/// Mean of `Gamma_s prod u(s, X_s) - prod u(t, x) - int_t^s ...`, which is a
/// martingale started at zero.
#[allow(clippy::too_many_arguments)]
pub fn dynkin_residual(
    u: &TestFunction,
    t: f64,
    mu: &Population,
    policy: &Policy,
    params: &ModelParams,
    s: f64,
    mc: &McConfig,
    bias_constant: f64,
) -> Result<DynkinReport, EstimatorError> {
    require_reps(mc, 2)?;
    u.check(params.dim())?;
    if !(t <= s) {
        return Err(EstimatorError::Precondition(format!(
            "need t <= s, got {t} > {s}"
        )));
    }
    let start: f64 = mu.iter().map(|(_, x)| u.value(t, x)).product();
    let cfg = mc.sim.clone().with_horizon(s).with_stop(StopRule::Horizon);
    let samples = replicate(mc, |seed| {
        let mut obs = DynkinIntegrator {
            u,
            params,
            integral: 0.0,
            jets: Vec::new(),
            suffix: Vec::new(),
        };
        let path = simulate_observed(t, mu, policy, params, &cfg, seed, &mut obs)?;
        let end: f64 = path.terminal.iter().map(|(_, x)| u.value(s, x)).product();
        Ok(path.discount() * end - start - obs.integral)
    })?;
    let residual = Estimate::from_samples(&samples, mc.seed_base);
    let allowance = bias_constant * mc.sim.step;
    let band = 3.0 * residual.stderr + allowance;
    Ok(DynkinReport {
        residual,
        allowance,
        band,
        pass: residual.mean.abs() <= band,
    })
}

/// Stopping times used by the dynamic programming check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "time", rename_all = "kebab-case")]
pub enum StoppingRule {
    Fixed(f64),
    /// The first branching or death event, capped at the given time.
    FirstEventOr(f64),
}

impl StoppingRule {
    pub fn cap(&self) -> f64 {
        match self {
            StoppingRule::Fixed(s) | StoppingRule::FirstEventOr(s) => *s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DppReport {
    pub policy: String,
    pub stopping: StoppingRule,
    pub estimate: Estimate,
    /// `prod v(t, x^i)` read from the grid.
    pub baseline: f64,
    pub slack: f64,
    pub allowance: f64,
    pub band: f64,
    /// `slack >= -band`.
    pub lower_bound_ok: bool,
    /// `|slack| <= band`.
    pub near_optimal: bool,
}

/// Estimates `E[Gamma_tau prod v(tau, X_tau)]` with `v` interpolated from a
/// solved grid and compares it with `prod v(t, x^i)`.
#[allow(clippy::too_many_arguments)]
pub fn dpp_check(
    t: f64,
    mu: &Population,
    policy: &Policy,
    params: &ModelParams,
    tau: StoppingRule,
    grid: &ValueGrid,
    mc: &McConfig,
    allowance: f64,
) -> Result<DppReport, EstimatorError> {
    require_reps(mc, 2)?;
    if params.dim() != 1 {
        return Err(EstimatorError::Precondition(
            "the grid value is one-dimensional".into(),
        ));
    }
    let mut baseline = 1.0;
    for (_, x) in mu.iter() {
        baseline *= grid.evaluate(t, x[0])?;
    }
    let stop = match tau {
        StoppingRule::Fixed(_) => StopRule::Horizon,
        StoppingRule::FirstEventOr(_) => StopRule::FirstEvent,
    };
    let cfg = mc.sim.clone().with_horizon(tau.cap()).with_stop(stop);
    // validate the stopping horizon once so grid errors surface before the fan-out
    grid.evaluate(tau.cap(), 0.0)?;
    let samples = replicate(mc, |seed| {
        let path = simulate(t, mu, policy, params, &cfg, seed)?;
        let product: f64 = path
            .terminal
            .iter()
            .map(|(_, x)| grid.evaluate(path.end, x[0]).unwrap_or(f64::NAN))
            .product();
        Ok(path.discount() * product)
    })?;
    let estimate = Estimate::from_samples(&samples, mc.seed_base);
    let slack = estimate.mean - baseline;
    let band = 3.0 * estimate.stderr + allowance;
    Ok(DppReport {
        policy: policy.describe(),
        stopping: tau,
        estimate,
        baseline,
        slack,
        allowance,
        band,
        lower_bound_ok: slack >= -band,
        near_optimal: slack.abs() <= band,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentReport {
    pub sup_population: Estimate,
    /// `|V| e^{gamma_bar M (T - t)}`.
    pub bound: f64,
    pub pass: bool,
}

/// `|V| e^{gamma_bar M (T - t)}`.
pub fn moment_bound(initial_size: usize, params: &ModelParams, t: f64, horizon: f64) -> f64 {
    initial_size as f64 * (params.gamma_bar() * params.mean_offspring_bound() * (horizon - t)).exp()
}

/// Checks the mean of `sup N` against the exponential moment bound.
pub fn moment_check(
    summaries: &[ReplicationSummary],
    params: &ModelParams,
    initial_size: usize,
    t: f64,
    horizon: f64,
    seed_base: u64,
) -> Result<MomentReport, EstimatorError> {
    if summaries.len() < 100 {
        return Err(EstimatorError::Precondition(format!(
            "moment check needs at least 100 replications, got {}",
            summaries.len()
        )));
    }
    let sups: Vec<f64> = summaries.iter().map(|s| s.sup_n as f64).collect();
    let sup_population = Estimate::from_samples(&sups, seed_base);
    let bound = moment_bound(initial_size, params, t, horizon);
    Ok(MomentReport {
        sup_population,
        bound,
        pass: sup_population.mean <= bound + 3.0 * sup_population.stderr,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgreementRow {
    pub x: f64,
    pub mc: Estimate,
    pub pde: f64,
    pub difference: f64,
    pub band: f64,
    pub pass: bool,
}

/// Single-particle Monte Carlo value against the grid value at each probe.
/// Probe `k` uses seed base `seed_base + k reps`.
pub fn mc_pde_agreement(
    t: f64,
    probes: &[f64],
    policy: &Policy,
    params: &ModelParams,
    grid: &ValueGrid,
    mc: &McConfig,
    allowance: f64,
) -> Result<Vec<AgreementRow>, EstimatorError> {
    let mut rows = Vec::with_capacity(probes.len());
    for (k, &x) in probes.iter().enumerate() {
        let base = mc.seed_base.wrapping_add((k * mc.reps) as u64);
        let mu = Population::single(vec![x]);
        let est = estimate_value(t, &mu, policy, params, &mc.reseeded(base))?;
        let pde = grid.evaluate(t, x)?;
        let difference = (est.mean - pde).abs();
        let band = 3.0 * est.stderr + allowance;
        rows.push(AgreementRow {
            x,
            mc: est,
            pde,
            difference,
            band,
            pass: difference <= band,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CouplingReport {
    pub delta: f64,
    pub successes: usize,
    pub n: usize,
    pub rate: f64,
    pub stderr: f64,
}

/// Fraction of coupled pairs whose genealogies agree and whose positions stay
/// within `delta`.
pub fn coupling_success(
    t: f64,
    mu: &Population,
    policy: &Policy,
    params: &ModelParams,
    params_tilde: &ModelParams,
    delta: f64,
    mc: &McConfig,
) -> Result<CouplingReport, EstimatorError> {
    require_reps(mc, 2)?;
    let hits = replicate(mc, |seed| {
        simulate_coupled(t, mu, policy, params, params_tilde, delta, &mc.sim, seed).map(|c| {
            if c.success {
                1.0
            } else {
                0.0
            }
        })
    })?;
    let est = Estimate::from_samples(&hits, mc.seed_base);
    Ok(CouplingReport {
        delta,
        successes: hits.iter().filter(|h| **h > 0.0).count(),
        n: hits.len(),
        rate: est.mean,
        stderr: est.stderr,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DominanceReport {
    pub n: usize,
    /// Seeds where the lower model's cost exceeded the upper model's.
    pub violations: usize,
    pub max_excess: f64,
    pub lower: Estimate,
    pub upper: Estimate,
}

/// Common-random-number comparison: `lower` and `upper` share dynamics and
/// differ only in `c` or `g`, so with equal seeds the costs must be ordered
/// path by path.
pub fn crn_dominance(
    t: f64,
    mu: &Population,
    policy: &Policy,
    lower: &ModelParams,
    upper: &ModelParams,
    mc: &McConfig,
) -> Result<DominanceReport, EstimatorError> {
    require_reps(mc, 2)?;
    let pairs = replicate(mc, |seed| {
        let a = simulate(t, mu, policy, lower, &mc.sim, seed)?;
        let b = simulate(t, mu, policy, upper, &mc.sim, seed)?;
        Ok((pathwise_cost(&a, lower), pathwise_cost(&b, upper)))
    })?;
    let excess: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let lo: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let hi: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok(DominanceReport {
        n: pairs.len(),
        violations: excess.iter().filter(|e| **e > 0.0).count(),
        max_excess: excess.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        lower: Estimate::from_samples(&lo, mc.seed_base),
        upper: Estimate::from_samples(&hi, mc.seed_base),
    })
}

//! Path generation for the controlled branching diffusion.
//!
//! The population is built event by event. Every living particle carries a
//! Poisson clock of the dominating rate `gamma_bar`; the earliest ring is the
//! next potential event. Between rings each particle follows Euler–Maruyama
//! steps on the global mesh `t + k h`, with a partial step landing on the ring
//! time. At a ring the particle draws a uniform mark `zeta` on
//! `[0, gamma_bar)`: marks at or above `gamma(x, a)` are phantom events and
//! change nothing, otherwise the offspring cell containing `zeta` decides how
//! many children replace the particle at its position.

use serde::Serialize;
use thiserror::Error;

use crate::labels::{Label, LabelError, Population};
use crate::model::{intervals_from, ControlIndex, ModelParams};
use crate::policy::Policy;
use crate::rng::{ParticleStreams, RandomDriver};

/// Default explosion guard.
pub const DEFAULT_MAX_POPULATION: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation setup: {0}")]
    Config(String),
    #[error("initial population: {0}")]
    Population(#[from] LabelError),
    #[error(
        "population exceeded the cap of {cap} particles at t = {time} \
         (seed {seed}, {events} events, {population} alive)"
    )]
    Explosion {
        cap: usize,
        time: f64,
        population: usize,
        events: usize,
        seed: u64,
    },
}

/// When a run ends.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Run to the horizon.
    #[default]
    Horizon,
    /// Stop right after the first non-phantom event, or at the horizon.
    FirstEvent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Euler–Maruyama step `h`.
    pub step: f64,
    pub horizon: f64,
    pub max_population: usize,
    pub record_trajectories: bool,
    pub stop: StopRule,
}

impl SimConfig {
    pub fn new(step: f64, horizon: f64) -> Self {
        SimConfig {
            step,
            horizon,
            max_population: DEFAULT_MAX_POPULATION,
            record_trajectories: false,
            stop: StopRule::Horizon,
        }
    }

    pub fn with_stop(mut self, stop: StopRule) -> Self {
        self.stop = stop;
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_trajectories = true;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Phantom,
    Death,
    /// Replaced by `l >= 1` children.
    Branch(usize),
}

impl Outcome {
    /// Change in population size.
    pub fn size_change(&self) -> isize {
        match self {
            Outcome::Phantom => 0,
            Outcome::Death => -1,
            Outcome::Branch(l) => *l as isize - 1,
        }
    }

    pub fn is_phantom(&self) -> bool {
        matches!(self, Outcome::Phantom)
    }

    pub fn name(&self) -> String {
        match self {
            Outcome::Phantom => "phantom".into(),
            Outcome::Death => "death".into(),
            Outcome::Branch(l) => format!("branch({l})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    pub label: Label,
    pub mark: f64,
    pub outcome: Outcome,
    pub position: Vec<f64>,
}

/// Positions of one particle sampled at every mesh and event time of its life.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub label: Label,
    pub birth: f64,
    /// Death time, or `None` if alive at the end of the run.
    pub death: Option<f64>,
    pub samples: Vec<(f64, Vec<f64>)>,
}

/// Full record of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PopulationPath {
    pub start: f64,
    pub horizon: f64,
    /// Time the run ended: the horizon, or the stopping event time.
    pub end: f64,
    pub seed: u64,
    pub events: Vec<Event>,
    /// `int_t^end sum_i c(X^i, a^i) ds` by left-endpoint quadrature.
    pub running_cost: f64,
    /// `(time, N)` at the start and after every non-phantom event.
    pub population: Vec<(f64, usize)>,
    pub sup_population: usize,
    pub terminal: Vec<(Label, Vec<f64>)>,
    pub trajectories: Option<Vec<Trajectory>>,
    pub steps: usize,
}

impl PopulationPath {
    /// `exp(-running_cost)`.
    pub fn discount(&self) -> f64 {
        (-self.running_cost).exp()
    }

    pub fn extinct(&self) -> bool {
        self.terminal.is_empty()
    }

    pub fn real_events(&self) -> usize {
        self.events
            .iter()
            .filter(|e| !e.outcome.is_phantom())
            .count()
    }

    pub fn summary(&self, params: &ModelParams) -> ReplicationSummary {
        ReplicationSummary {
            seed: self.seed,
            cost: pathwise_cost(self, params),
            sup_n: self.sup_population,
            n_events: self.events.len(),
            extinct: self.extinct(),
        }
    }
}

/// One JSON line per replication.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicationSummary {
    pub seed: u64,
    pub cost: f64,
    #[serde(rename = "supN")]
    pub sup_n: usize,
    pub n_events: usize,
    pub extinct: bool,
}

/// A living particle inside the engine.
#[derive(Clone, Debug)]
pub struct Particle {
    label: Label,
    x: Vec<f64>,
    next_ring: f64,
    birth: f64,
    streams: ParticleStreams,
    samples: Option<Vec<(f64, Vec<f64>)>>,
}

impl Particle {
    pub fn label(&self) -> &Label {
        &self.label
    }
    pub fn position(&self) -> &[f64] {
        &self.x
    }
}

/// State handed to a [`PathObserver`] before each Euler step.
pub struct StepContext<'a> {
    /// Left endpoint of the step.
    pub time: f64,
    pub dt: f64,
    /// `exp(-int_t^time sum_i c ds)` at the left endpoint.
    pub discount: f64,
    pub particles: &'a [Particle],
    /// Control of each particle on this step.
    pub controls: &'a [ControlIndex],
}

/// Hook into the step loop, used to integrate functionals along a path.
pub trait PathObserver {
    fn on_step(&mut self, ctx: &StepContext<'_>);
}

impl PathObserver for () {
    fn on_step(&mut self, _: &StepContext<'_>) {}
}

struct Tick {
    fired: Option<Outcome>,
}

struct Engine<'a> {
    params: &'a ModelParams,
    policy: &'a Policy,
    cfg: &'a SimConfig,
    driver: RandomDriver,
    start: f64,
    time: f64,
    mesh_index: u64,
    particles: Vec<Particle>,
    controls: Vec<ControlIndex>,
    running_cost: f64,
    events: Vec<Event>,
    population: Vec<(f64, usize)>,
    sup_population: usize,
    finished: Vec<Trajectory>,
    steps: usize,
    stopped: bool,
    drift: Vec<f64>,
    sigma: Vec<f64>,
    noise: Vec<f64>,
    probs: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(
        t: f64,
        mu: &Population,
        policy: &'a Policy,
        params: &'a ModelParams,
        cfg: &'a SimConfig,
        seed: u64,
    ) -> Result<Self, SimError> {
        if !(cfg.step > 0.0 && cfg.step.is_finite()) {
            return Err(SimError::Config(format!(
                "step h must be positive, got {}",
                cfg.step
            )));
        }
        if !(t.is_finite() && cfg.horizon.is_finite() && t <= cfg.horizon) {
            return Err(SimError::Config(format!(
                "need t <= T, got t = {t}, T = {}",
                cfg.horizon
            )));
        }
        if policy.max_control() >= params.num_controls() {
            return Err(SimError::Config(format!(
                "policy uses control {} but the model has {} controls",
                policy.max_control(),
                params.num_controls()
            )));
        }
        mu.check_antichain()?;
        let d = params.dim();
        if let Some((l, x)) = mu.iter().find(|(_, x)| x.len() != d) {
            return Err(SimError::Config(format!(
                "particle {l:?} has dimension {}, model has {d}",
                x.len()
            )));
        }
        let driver = RandomDriver::new(seed);
        let mut engine = Engine {
            params,
            policy,
            cfg,
            driver,
            start: t,
            time: t,
            mesh_index: 0,
            particles: Vec::with_capacity(mu.len()),
            controls: Vec::new(),
            running_cost: 0.0,
            events: Vec::new(),
            population: vec![(t, mu.len())],
            sup_population: mu.len(),
            finished: Vec::new(),
            steps: 0,
            stopped: false,
            drift: vec![0.0; d],
            sigma: vec![0.0; d * params.noise_dim()],
            noise: vec![0.0; params.noise_dim()],
            probs: vec![0.0; params.max_offspring() + 1],
        };
        for (label, x) in mu.iter() {
            let p = engine.spawn(label.clone(), x.to_vec());
            engine.particles.push(p);
        }
        engine.check_cap()?;
        Ok(engine)
    }

    fn spawn(&self, label: Label, x: Vec<f64>) -> Particle {
        let mut streams = self.driver.streams(&label);
        let next_ring = self.time + streams.next_gap(self.params.gamma_bar());
        let samples = self
            .cfg
            .record_trajectories
            .then(|| vec![(self.time, x.clone())]);
        Particle {
            label,
            x,
            next_ring,
            birth: self.time,
            streams,
            samples,
        }
    }

    fn check_cap(&self) -> Result<(), SimError> {
        if self.particles.len() > self.cfg.max_population {
            return Err(SimError::Explosion {
                cap: self.cfg.max_population,
                time: self.time,
                population: self.particles.len(),
                events: self.events.len(),
                seed: self.driver.seed(),
            });
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.stopped || self.time >= self.cfg.horizon
    }

    fn next_ring(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.particles.iter().enumerate() {
            if best.is_none_or(|(_, t)| p.next_ring < t) {
                best = Some((i, p.next_ring));
            }
        }
        best
    }

    fn next_mesh(&self) -> f64 {
        self.start + (self.mesh_index + 1) as f64 * self.cfg.step
    }

    /// Advances to the next mesh point, ring or horizon, then fires the ring
    /// if it was reached.
    fn tick(&mut self, observer: &mut impl PathObserver) -> Result<Tick, SimError> {
        let horizon = self.cfg.horizon;
        if self.particles.is_empty() {
            self.time = horizon;
            return Ok(Tick { fired: None });
        }
        let mesh = self.next_mesh();
        let ring = self.next_ring();
        let mut target = mesh.min(horizon);
        if let Some((_, r)) = ring {
            target = target.min(r);
        }
        self.step_to(target, observer);
        if target == mesh {
            self.mesh_index += 1;
        }
        let mut fired = None;
        if let Some((i, r)) = ring {
            if r == target && r < horizon {
                let outcome = self.fire(i)?;
                if self.cfg.stop == StopRule::FirstEvent && !outcome.is_phantom() {
                    self.stopped = true;
                }
                fired = Some(outcome);
            }
        }
        Ok(Tick { fired })
    }

    fn step_to(&mut self, target: f64, observer: &mut impl PathObserver) {
        let dt = target - self.time;
        if dt <= 0.0 {
            return;
        }
        let params = self.params;
        self.controls.clear();
        for p in &self.particles {
            self.controls
                .push(self.policy.control(self.time, &p.x, &p.label));
        }
        observer.on_step(&StepContext {
            time: self.time,
            dt,
            discount: (-self.running_cost).exp(),
            particles: &self.particles,
            controls: &self.controls,
        });
        let sqrt_dt = dt.sqrt();
        let m = params.noise_dim();
        let mut cost = 0.0;
        for (p, &a) in self.particles.iter_mut().zip(&self.controls) {
            cost += params.running_cost(&p.x, a);
            params.drift_into(&p.x, a, &mut self.drift);
            params.diffusion_into(&p.x, a, &mut self.sigma);
            for z in self.noise.iter_mut() {
                *z = p.streams.gaussian();
            }
            for (i, xi) in p.x.iter_mut().enumerate() {
                let mut dx = self.drift[i] * dt;
                for k in 0..m {
                    dx += self.sigma[i * m + k] * sqrt_dt * self.noise[k];
                }
                *xi += dx;
            }
        }
        self.running_cost += cost * dt;
        self.time = target;
        self.steps += 1;
        if self.cfg.record_trajectories {
            let t = self.time;
            for p in &mut self.particles {
                if let Some(s) = p.samples.as_mut() {
                    s.push((t, p.x.clone()));
                }
            }
        }
    }

    fn fire(&mut self, i: usize) -> Result<Outcome, SimError> {
        let gamma_bar = self.params.gamma_bar();
        let t = self.time;
        let (outcome, mark) = {
            let p = &mut self.particles[i];
            let mark = p.streams.mark(gamma_bar);
            let a = self.policy.control(t, &p.x, &p.label);
            let rate = self.params.death_rate(&p.x, a);
            let outcome = if mark >= rate {
                Outcome::Phantom
            } else {
                self.params.offspring_into(&p.x, a, &mut self.probs);
                let cells = intervals_from(rate, &self.probs);
                match cells.iter().position(|c| c.contains(mark)) {
                    Some(0) => Outcome::Death,
                    Some(l) => Outcome::Branch(l),
                    // mark < rate always falls in some cell; keep the last one
                    None => match cells.len() - 1 {
                        0 => Outcome::Death,
                        l => Outcome::Branch(l),
                    },
                }
            };
            if outcome.is_phantom() {
                p.next_ring = t + p.streams.next_gap(gamma_bar);
            }
            (outcome, mark)
        };
        self.events.push(Event {
            time: t,
            label: self.particles[i].label.clone(),
            mark,
            outcome,
            position: self.particles[i].x.clone(),
        });
        if outcome.is_phantom() {
            return Ok(outcome);
        }
        let parent = self.particles.remove(i);
        let children = match outcome {
            Outcome::Branch(l) => l,
            _ => 0,
        };
        let born: Vec<Particle> = parent
            .label
            .children(children)
            .into_iter()
            .map(|label| self.spawn(label, parent.x.clone()))
            .collect();
        if let Some(samples) = parent.samples {
            self.finished.push(Trajectory {
                label: parent.label,
                birth: parent.birth,
                death: Some(t),
                samples,
            });
        }
        self.particles.splice(i..i, born);
        self.population.push((t, self.particles.len()));
        self.sup_population = self.sup_population.max(self.particles.len());
        self.check_cap()?;
        Ok(outcome)
    }

    fn run(&mut self, observer: &mut impl PathObserver) -> Result<(), SimError> {
        while !self.done() {
            self.tick(observer)?;
        }
        Ok(())
    }

    fn max_deviation(&self, other: &Engine<'_>) -> f64 {
        self.particles
            .iter()
            .zip(&other.particles)
            .map(|(p, q)| {
                p.x.iter()
                    .zip(&q.x)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    fn same_labels(&self, other: &Engine<'_>) -> bool {
        self.particles.len() == other.particles.len()
            && self
                .particles
                .iter()
                .zip(&other.particles)
                .all(|(p, q)| p.label == q.label)
    }

    fn finish(self) -> PopulationPath {
        let end = self.time;
        let mut trajectories = self.cfg.record_trajectories.then_some(self.finished);
        let terminal = self
            .particles
            .into_iter()
            .map(|p| {
                if let (Some(t), Some(samples)) = (trajectories.as_mut(), p.samples) {
                    t.push(Trajectory {
                        label: p.label.clone(),
                        birth: p.birth,
                        death: None,
                        samples,
                    });
                }
                (p.label, p.x)
            })
            .collect();
        PopulationPath {
            start: self.start,
            horizon: self.cfg.horizon,
            end,
            seed: self.driver.seed(),
            events: self.events,
            running_cost: self.running_cost,
            population: self.population,
            sup_population: self.sup_population,
            terminal,
            trajectories,
            steps: self.steps,
        }
    }
}

/// Simulates one path from `(t, mu)` to the horizon (or the stopping event).
pub fn simulate(
    t: f64,
    mu: &Population,
    policy: &Policy,
    params: &ModelParams,
    cfg: &SimConfig,
    seed: u64,
) -> Result<PopulationPath, SimError> {
    simulate_observed(t, mu, policy, params, cfg, seed, &mut ())
}

/// [`simulate`] with an observer called before every Euler step.
pub fn simulate_observed(
    t: f64,
    mu: &Population,
    policy: &Policy,
    params: &ModelParams,
    cfg: &SimConfig,
    seed: u64,
    observer: &mut impl PathObserver,
) -> Result<PopulationPath, SimError> {
    let mut engine = Engine::new(t, mu, policy, params, cfg, seed)?;
    engine.run(observer)?;
    Ok(engine.finish())
}

/// Why a coupled pair stopped tracking each other.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum Divergence {
    /// The two systems classified an event differently.
    Outcome {
        time: f64,
        label: Label,
        left: Outcome,
        right: Outcome,
    },
    /// Some particle pair drifted further apart than `delta`.
    Distance { time: f64, deviation: f64 },
    /// Event clocks disagreed (only possible after a genealogy split).
    Clock { time: f64 },
}

#[derive(Clone, Debug)]
pub struct CoupledPaths {
    pub path: PopulationPath,
    pub path_tilde: PopulationPath,
    /// Same genealogy throughout and positions within `delta` at every
    /// sampled time.
    pub success: bool,
    pub divergence: Option<Divergence>,
    /// Largest particle distance observed while the genealogies agreed.
    pub max_deviation: f64,
}

/// Runs two parameter sets on the same random driver. The systems advance in
/// lockstep while their genealogies agree; after the first divergence each
/// continues on its own.
#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled(
    t: f64,
    mu: &Population,
    policy: &Policy,
    params: &ModelParams,
    params_tilde: &ModelParams,
    delta: f64,
    cfg: &SimConfig,
    seed: u64,
) -> Result<CoupledPaths, SimError> {
    params
        .check_comparable(params_tilde)
        .map_err(|e| SimError::Config(e.to_string()))?;
    let mut left = Engine::new(t, mu, policy, params, cfg, seed)?;
    let mut right = Engine::new(t, mu, policy, params_tilde, cfg, seed)?;
    let mut divergence = None;
    let mut max_deviation: f64 = 0.0;
    while divergence.is_none() && !(left.done() && right.done()) {
        if left.done() != right.done() {
            divergence = Some(Divergence::Clock { time: left.time });
            break;
        }
        let event_label = left
            .next_ring()
            .map(|(i, _)| left.particles[i].label.clone());
        let a = left.tick(&mut ())?;
        let b = right.tick(&mut ())?;
        if left.time != right.time {
            divergence = Some(Divergence::Clock { time: left.time });
            break;
        }
        match (a.fired, b.fired) {
            (None, None) => {}
            (Some(x), Some(y)) if x == y => {}
            (Some(x), Some(y)) => {
                divergence = Some(Divergence::Outcome {
                    time: left.time,
                    label: event_label.unwrap_or_default(),
                    left: x,
                    right: y,
                });
                break;
            }
            _ => {
                divergence = Some(Divergence::Clock { time: left.time });
                break;
            }
        }
        if !left.same_labels(&right) {
            divergence = Some(Divergence::Clock { time: left.time });
            break;
        }
        let dev = left.max_deviation(&right);
        max_deviation = max_deviation.max(dev);
        if dev > delta {
            divergence = Some(Divergence::Distance {
                time: left.time,
                deviation: dev,
            });
        }
    }
    left.run(&mut ())?;
    right.run(&mut ())?;
    Ok(CoupledPaths {
        path: left.finish(),
        path_tilde: right.finish(),
        success: divergence.is_none(),
        divergence,
        max_deviation,
    })
}

/// `Gamma_T * prod_{i in V_T} g(X^i_T)`; an empty product is one.
pub fn pathwise_cost(path: &PopulationPath, params: &ModelParams) -> f64 {
    let product: f64 = path
        .terminal
        .iter()
        .map(|(_, x)| params.terminal_cost(x))
        .product();
    path.discount() * product
}

#[derive(Debug, Error, PartialEq)]
#[error("terminal cost vanishes at particle {label:?}; the log form needs g > 0")]
pub struct LogFormDomainError {
    pub label: Label,
}

/// `exp(-int <Z, c> ds - <Z_T, -ln g>)`.
pub fn pathwise_cost_log_form(
    path: &PopulationPath,
    params: &ModelParams,
) -> Result<f64, LogFormDomainError> {
    let mut exponent = path.running_cost;
    for (label, x) in &path.terminal {
        let g = params.terminal_cost(x);
        if !(g > 0.0) {
            return Err(LogFormDomainError {
                label: label.clone(),
            });
        }
        exponent -= g.ln();
    }
    Ok((-exponent).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::{constant, constant_1d};
    use crate::model::CoefficientSpec;

    fn critical() -> ModelParams {
        constant_1d(0.0, 0.0, 1.0, 1.0, &[0.5, 0.0, 0.5], 0.0, constant(0.0))
    }

    #[test]
    fn no_branching_reduces_to_euler_maruyama() {
        let m = constant_1d(0.4, 0.3, 0.0, 2.0, &[1.0], 0.0, constant(1.0));
        let cfg = SimConfig::new(0.1, 1.05);
        let path = simulate(
            0.0,
            &Population::single(vec![0.2]),
            &Policy::Constant(0),
            &m,
            &cfg,
            11,
        )
        .unwrap();
        assert_eq!(path.real_events(), 0);
        assert_eq!(path.terminal.len(), 1);
        // independent replay of the root's Brownian stream
        let mut s = RandomDriver::new(11).streams(&Label::root());
        let mut x: f64 = 0.2;
        let mut t: f64 = 0.0;
        let mut k = 0;
        let rings: Vec<f64> = path.events.iter().map(|e| e.time).collect();
        let mut ring_iter = rings.iter().peekable();
        while t < 1.05 {
            let mesh = (k + 1) as f64 * 0.1;
            let mut target = mesh.min(1.05);
            if let Some(&&r) = ring_iter.peek() {
                if r < target {
                    target = r;
                    ring_iter.next();
                }
            }
            let dt = target - t;
            x += 0.4 * dt + 0.3 * dt.sqrt() * s.gaussian();
            if target == mesh {
                k += 1;
            }
            t = target;
        }
        assert_eq!(path.terminal[0].1[0], x);
    }

    #[test]
    fn outcomes_follow_mark_cells() {
        let m = critical();
        let cfg = SimConfig::new(0.05, 3.0);
        for seed in 0..50 {
            let path = simulate(
                0.0,
                &Population::single(vec![0.0]),
                &Policy::Constant(0),
                &m,
                &cfg,
                seed,
            )
            .unwrap();
            for e in &path.events {
                let expected = if e.mark < 0.5 {
                    Outcome::Death
                } else {
                    Outcome::Branch(2)
                };
                assert_eq!(e.outcome, expected);
            }
        }
    }

    #[test]
    fn population_changes_only_at_real_events() {
        let m = constant_1d(
            0.1,
            0.5,
            0.6,
            1.0,
            &[0.3, 0.2, 0.3, 0.2],
            0.0,
            constant(0.5),
        );
        let cfg = SimConfig::new(0.05, 2.0).recording();
        for seed in 0..30 {
            let path = simulate(
                0.0,
                &Population::single(vec![0.0]),
                &Policy::Constant(0),
                &m,
                &cfg,
                seed,
            )
            .unwrap();
            let real: Vec<&Event> = path
                .events
                .iter()
                .filter(|e| !e.outcome.is_phantom())
                .collect();
            assert_eq!(path.population.len(), real.len() + 1);
            for (w, e) in path.population.windows(2).zip(&real) {
                assert_eq!(w[1].0, e.time);
                assert_eq!(w[1].1 as isize - w[0].1 as isize, e.outcome.size_change());
            }
            // children start where the parent died
            let trajs = path.trajectories.as_ref().unwrap();
            for t in trajs.iter().filter(|t| !t.label.is_root()) {
                let parent_label = Label::new(t.label.as_slice()[..t.label.depth() - 1].to_vec());
                let parent = trajs.iter().find(|p| p.label == parent_label).unwrap();
                assert_eq!(parent.death, Some(t.birth));
                assert_eq!(parent.samples.last().unwrap().1, t.samples[0].1);
            }
        }
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let m = constant_1d(0.1, 0.5, 0.6, 1.0, &[0.3, 0.2, 0.5], 0.2, constant(0.5));
        let cfg = SimConfig::new(0.01, 1.0).recording();
        let mu = Population::siblings([vec![0.0], vec![1.0]]);
        let a = simulate(0.0, &mu, &Policy::Constant(0), &m, &cfg, 5).unwrap();
        let b = simulate(0.0, &mu, &Policy::Constant(0), &m, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pathwise_cost_examples() {
        let base = PopulationPath {
            start: 0.0,
            horizon: 1.0,
            end: 1.0,
            seed: 0,
            events: vec![],
            running_cost: 0.0,
            population: vec![(0.0, 1)],
            sup_population: 1,
            terminal: vec![],
            trajectories: None,
            steps: 0,
        };
        let m = critical();
        assert_eq!(pathwise_cost(&base, &m), 1.0);
        let g = constant_1d(0.0, 0.0, 0.0, 1.0, &[1.0], 0.0, constant(0.3));
        let mut one = base.clone();
        one.terminal = vec![(Label::root(), vec![0.0])];
        assert_eq!(pathwise_cost(&one, &g), 0.3);
        let half = constant_1d(0.0, 0.0, 0.0, 1.0, &[1.0], 0.0, constant(0.5));
        assert!((pathwise_cost_log_form(&one, &half).unwrap() - 0.5).abs() < 1e-15);
        let zero = constant_1d(0.0, 0.0, 0.0, 1.0, &[1.0], 0.0, constant(0.0));
        assert!(pathwise_cost_log_form(&one, &zero).is_err());
    }

    #[test]
    fn unit_running_cost_gives_exponential_discount() {
        let m = constant_1d(0.0, 0.0, 0.0, 1.0, &[1.0], 1.0, constant(1.0));
        let cfg = SimConfig::new(0.01, 1.5);
        let path = simulate(
            0.25,
            &Population::single(vec![0.0]),
            &Policy::Constant(0),
            &m,
            &cfg,
            1,
        )
        .unwrap();
        assert!((pathwise_cost(&path, &m) - (-1.25f64).exp()).abs() < 1e-12);
        assert_eq!(
            pathwise_cost_log_form(&path, &m).unwrap(),
            pathwise_cost(&path, &m)
        );
    }

    #[test]
    fn config_errors() {
        let m = critical();
        let mu = Population::single(vec![0.0]);
        let p = Policy::Constant(0);
        assert!(matches!(
            simulate(0.0, &mu, &p, &m, &SimConfig::new(0.0, 1.0), 0),
            Err(SimError::Config(_))
        ));
        assert!(matches!(
            simulate(2.0, &mu, &p, &m, &SimConfig::new(0.1, 1.0), 0),
            Err(SimError::Config(_))
        ));
        assert!(matches!(
            simulate(
                0.0,
                &mu,
                &Policy::Constant(3),
                &m,
                &SimConfig::new(0.1, 1.0),
                0
            ),
            Err(SimError::Config(_))
        ));
        let bad = Population::from_pairs([(Label::root(), vec![0.0])]).unwrap();
        assert!(simulate(0.0, &bad, &p, &m, &SimConfig::new(0.1, 1.0), 0).is_ok());
    }

    #[test]
    fn explosion_guard_reports_partial_statistics() {
        let m = constant_1d(0.0, 0.0, 1.0, 1.0, &[0.0, 0.0, 1.0], 0.0, constant(1.0));
        let mut cfg = SimConfig::new(0.1, 20.0);
        cfg.max_population = 50;
        match simulate(
            0.0,
            &Population::single(vec![0.0]),
            &Policy::Constant(0),
            &m,
            &cfg,
            3,
        ) {
            Err(SimError::Explosion {
                population,
                events,
                cap,
                ..
            }) => {
                assert_eq!(cap, 50);
                assert_eq!(population, 51);
                assert_eq!(events, 50);
            }
            other => panic!("expected explosion, got {other:?}"),
        }
    }

    #[test]
    fn first_event_stop() {
        let m = critical();
        let cfg = SimConfig::new(0.1, 5.0).with_stop(StopRule::FirstEvent);
        for seed in 0..20 {
            let path = simulate(
                0.0,
                &Population::single(vec![0.0]),
                &Policy::Constant(0),
                &m,
                &cfg,
                seed,
            )
            .unwrap();
            let real = path.real_events();
            assert!(real <= 1);
            if real == 1 {
                assert_eq!(path.end, path.events.last().unwrap().time);
            } else {
                assert_eq!(path.end, 5.0);
            }
        }
    }

    #[test]
    fn coupled_identical_params_are_bit_identical() {
        let bump = CoefficientSpec::gaussian_bump(0.1, 0.8, vec![0.0], 1.0);
        let m = constant_1d(0.2, 0.6, 0.8, 1.0, &[0.3, 0.2, 0.5], 0.1, bump);
        let cfg = SimConfig::new(0.02, 1.5).recording();
        for seed in 0..20 {
            let c = simulate_coupled(
                0.0,
                &Population::single(vec![0.0]),
                &Policy::Constant(0),
                &m,
                &m,
                1e-9,
                &cfg,
                seed,
            )
            .unwrap();
            assert!(c.success);
            assert_eq!(c.path, c.path_tilde);
            assert_eq!(c.max_deviation, 0.0);
            let solo = simulate(
                0.0,
                &Population::single(vec![0.0]),
                &Policy::Constant(0),
                &m,
                &cfg,
                seed,
            )
            .unwrap();
            assert_eq!(solo, c.path);
        }
    }

    #[test]
    fn coupled_dead_vs_full_rate_diverges_at_first_event() {
        let full = constant_1d(0.0, 0.0, 1.0, 1.0, &[1.0], 0.0, constant(1.0));
        let none = constant_1d(0.0, 0.0, 0.0, 1.0, &[1.0], 0.0, constant(1.0));
        let cfg = SimConfig::new(0.1, 5.0);
        let c = simulate_coupled(
            0.0,
            &Population::single(vec![0.0]),
            &Policy::Constant(0),
            &full,
            &none,
            0.1,
            &cfg,
            9,
        )
        .unwrap();
        assert!(!c.success);
        assert!(matches!(
            c.divergence,
            Some(Divergence::Outcome {
                left: Outcome::Death,
                right: Outcome::Phantom,
                ..
            })
        ));
        assert!(c.path.extinct());
        assert!(!c.path_tilde.extinct());
    }

    #[test]
    fn drift_gap_larger_than_delta_fails() {
        let a = constant_1d(0.0, 0.2, 0.0, 1.0, &[1.0], 0.0, constant(1.0));
        let b = constant_1d(0.5, 0.2, 0.0, 1.0, &[1.0], 0.0, constant(1.0));
        let cfg = SimConfig::new(0.01, 1.0);
        let c = simulate_coupled(
            0.0,
            &Population::single(vec![0.0]),
            &Policy::Constant(0),
            &a,
            &b,
            0.1,
            &cfg,
            2,
        )
        .unwrap();
        assert!(!c.success);
        match c.divergence {
            Some(Divergence::Distance { time, .. }) => assert!((time - 0.21).abs() < 0.011),
            other => panic!("{other:?}"),
        }
    }
}

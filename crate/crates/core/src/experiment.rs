//! Experiment files: a model reference, simulation and grid settings, and an
//! ordered task list. [`run`] executes the tasks and writes `manifest.json`,
//! one JSON report per task and `summary.csv`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimator::{
    check_branching, coupling_success, dpp_check, dynkin_residual, mc_pde_agreement, moment_check,
    replication_summaries, Estimate, EstimatorError, McConfig, StoppingRule, TestFunction,
};
use crate::hjb::{self, BoundaryRule, GridConfig, HjbError, ValueGrid};
use crate::labels::Population;
use crate::model::{ModelError, ModelParams};
use crate::output::{self, SummaryRow};
use crate::policy::{extract_feedback, Policy, Schedule};
use crate::simulator::{simulate, SimConfig, SimError, DEFAULT_MAX_POPULATION};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VERIFICATION_FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const VALIDATION: i32 = 3;
    pub const IO: i32 = 4;
    pub const EXPLOSION: i32 = 5;
    pub const NUMERICAL: i32 = 6;
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("explosion guard: {0}")]
    Explosion(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Parse { .. } => exit::USAGE,
            RunError::Validation(_) => exit::VALIDATION,
            RunError::Io { .. } => exit::IO,
            RunError::Explosion(_) => exit::EXPLOSION,
            RunError::Numerical(_) => exit::NUMERICAL,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<HjbError> for RunError {
    fn from(e: HjbError) -> Self {
        match e {
            HjbError::NumericalFailure { .. } => RunError::Numerical(e.to_string()),
            _ => RunError::Validation(e.to_string()),
        }
    }
}

impl From<SimError> for RunError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Explosion { .. } => RunError::Explosion(e.to_string()),
            _ => RunError::Validation(e.to_string()),
        }
    }
}

impl From<EstimatorError> for RunError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::Simulation { source, .. } => match source {
                SimError::Explosion { .. } => RunError::Explosion(source.to_string()),
                other => RunError::Validation(other.to_string()),
            },
            EstimatorError::Precondition(m) => RunError::Validation(m),
            EstimatorError::Grid(g) => g.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model file, relative to the experiment file.
    pub model: PathBuf,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub simulation: SimulationSection,
    #[serde(default)]
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub validation: ValidationSection,
    #[serde(rename = "task", default)]
    pub tasks: Vec<TaskSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default)]
    pub t0: f64,
    pub horizon: f64,
    pub step: f64,
    pub reps: usize,
    pub seed: u64,
    #[serde(default = "default_max_population")]
    pub max_population: usize,
    /// Starting positions, one particle each.
    pub initial: Vec<Vec<f64>>,
    #[serde(default = "default_delta")]
    pub coupling_delta: f64,
}

fn default_max_population() -> usize {
    DEFAULT_MAX_POPULATION
}

fn default_delta() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n_x: usize,
    /// Smallest CFL-satisfying value when omitted.
    #[serde(default)]
    pub n_t: Option<usize>,
    #[serde(default)]
    pub boundary: BoundaryRule,
}

/// Probe lattice on which the model invariants are checked before any task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSection {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for ValidationSection {
    fn default() -> Self {
        ValidationSection {
            lo: -5.0,
            hi: 5.0,
            points: 41,
        }
    }
}

/// `"feedback"`, `{ constant = a }` or `{ schedule = [[start, a], ...] }`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicySpec {
    #[default]
    Feedback,
    Constant(usize),
    Schedule(Vec<(f64, usize)>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Solve the HJB grid; optionally compare interior nodes at `t0` with a
    /// constant and run the refinement and domain-widening checks.
    Solve {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        expect: Option<Expectation>,
        #[serde(default = "yes")]
        export: bool,
        #[serde(default)]
        convergence_levels: usize,
        #[serde(default)]
        boundary_check: bool,
    },
    /// Cost estimate from the initial population, optionally against an
    /// expected value or the grid at `pde_probes`.
    Estimate {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        policy: PolicySpec,
        #[serde(default)]
        expect: Option<f64>,
        #[serde(default)]
        allowance: f64,
        #[serde(default)]
        pde_probes: Vec<f64>,
        #[serde(default)]
        dump_path: bool,
    },
    Branching {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        positions: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        policy: PolicySpec,
    },
    Dpp {
        #[serde(default)]
        name: Option<String>,
        policies: Vec<PolicySpec>,
        stopping: Vec<StoppingRule>,
        #[serde(default)]
        allowance: f64,
        /// Policy expected to be near-optimal (default: feedback).
        #[serde(default)]
        optimal: PolicySpec,
        /// Policy expected to show slack beyond three standard errors.
        #[serde(default)]
        suboptimal: Option<PolicySpec>,
    },
    Dynkin {
        #[serde(default)]
        name: Option<String>,
        functions: Vec<TestFunction>,
        times: Vec<f64>,
        #[serde(default = "default_bias")]
        bias_constant: f64,
        #[serde(default)]
        policy: PolicySpec,
    },
    Moment {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        policy: PolicySpec,
    },
    Couple {
        #[serde(default)]
        name: Option<String>,
        ladder: Vec<f64>,
        #[serde(default = "default_min_success")]
        min_success: f64,
        #[serde(default)]
        policy: PolicySpec,
    },
    /// Solve, estimate against the grid, branching, moment, Dynkin, DPP and
    /// coupling checks with defaults derived from the rest of the file.
    VerifyAll {
        #[serde(default)]
        name: Option<String>,
        #[serde(default = "default_allowance")]
        allowance: f64,
    },
}

fn yes() -> bool {
    true
}
fn default_bias() -> f64 {
    0.5
}
fn default_min_success() -> f64 {
    0.99
}
fn default_allowance() -> f64 {
    0.02
}

impl TaskSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            TaskSpec::Solve { .. } => "solve",
            TaskSpec::Estimate { .. } => "estimate",
            TaskSpec::Branching { .. } => "branching",
            TaskSpec::Dpp { .. } => "dpp",
            TaskSpec::Dynkin { .. } => "dynkin",
            TaskSpec::Moment { .. } => "moment",
            TaskSpec::Couple { .. } => "couple",
            TaskSpec::VerifyAll { .. } => "verify-all",
        }
    }

    fn name(&self) -> Option<&str> {
        match self {
            TaskSpec::Solve { name, .. }
            | TaskSpec::Estimate { name, .. }
            | TaskSpec::Branching { name, .. }
            | TaskSpec::Dpp { name, .. }
            | TaskSpec::Dynkin { name, .. }
            | TaskSpec::Moment { name, .. }
            | TaskSpec::Couple { name, .. }
            | TaskSpec::VerifyAll { name, .. } => name.as_deref(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, RunError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| RunError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.check().map_err(|message| RunError::Parse {
            path: origin.to_string(),
            message,
        })?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), String> {
        let s = &self.simulation;
        if s.initial.is_empty() {
            return Err("simulation.initial needs at least one position".into());
        }
        if s.reps < 2 {
            return Err("simulation.reps must be at least 2".into());
        }
        if !(s.step > 0.0) || !(s.t0 <= s.horizon) {
            return Err("need step > 0 and t0 <= horizon".into());
        }
        if self.tasks.is_empty() {
            return Err("no [[task]] entries".into());
        }
        for t in &self.tasks {
            let needs_grid = match t {
                TaskSpec::Solve { .. } | TaskSpec::Dpp { .. } | TaskSpec::VerifyAll { .. } => true,
                TaskSpec::Estimate { pde_probes, .. } => !pde_probes.is_empty(),
                _ => false,
            };
            if needs_grid && self.grid.is_none() {
                return Err(format!("task `{}` needs a [grid] section", t.kind()));
            }
            match t {
                TaskSpec::Dpp {
                    policies, stopping, ..
                } if policies.is_empty() || stopping.is_empty() => {
                    return Err("dpp needs at least one policy and one stopping rule".into())
                }
                TaskSpec::Dynkin {
                    functions, times, ..
                } if functions.is_empty() || times.is_empty() => {
                    return Err("dynkin needs at least one function and one time".into())
                }
                TaskSpec::Couple { ladder, .. } if ladder.is_empty() => {
                    return Err("couple needs a non-empty ladder".into())
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskEntry {
    pub name: String,
    pub kind: String,
    pub file: String,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: String,
    pub config_digest: String,
    pub model: String,
    pub seed: u64,
    pub reps: usize,
    /// Seconds since the Unix epoch; the only field that differs between
    /// identical reruns.
    pub timestamp: u64,
    pub tasks: Vec<TaskEntry>,
    pub all_pass: bool,
}

#[derive(Clone, Debug, Serialize)]
struct TaskReport {
    name: String,
    kind: String,
    config_digest: String,
    seed_base: u64,
    reps: usize,
    pass: bool,
    checks: Vec<SummaryRow>,
    details: serde_json::Value,
}

/// Outcome of a completed run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.manifest.all_pass {
            exit::OK
        } else {
            exit::VERIFICATION_FAILED
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads the experiment and its model, validates, runs every task and writes
/// the artifacts.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let text = fs::read_to_string(config_path).map_err(|e| RunError::io(config_path, e))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text, &config_path.display().to_string())?;
    if let Some(seed) = opts.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(reps) = opts.reps {
        cfg.simulation.reps = reps;
        cfg.check().map_err(|message| RunError::Parse {
            path: "--reps".into(),
            message,
        })?;
    }
    let base = config_path.parent().unwrap_or(Path::new("."));
    let model_path = base.join(&cfg.model);
    let model_text = fs::read_to_string(&model_path).map_err(|e| RunError::io(&model_path, e))?;
    let params = ModelParams::from_toml_str(&model_text).map_err(|e| match e {
        ModelError::Parse(p) => RunError::Parse {
            path: model_path.display().to_string(),
            message: p.to_string(),
        },
        other => RunError::Validation(other.to_string()),
    })?;

    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update(model_text.as_bytes());
    h.update(cfg.simulation.seed.to_le_bytes());
    h.update((cfg.simulation.reps as u64).to_le_bytes());
    let digest = hex(&h.finalize());

    let out_dir = opts
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("branchctl-out"));
    let mut runner = Runner::new(cfg, params, digest)?;
    fs::create_dir_all(&out_dir).map_err(|e| RunError::io(&out_dir, e))?;

    let mut entries = Vec::new();
    let mut rows = Vec::new();
    let tasks = runner.cfg.tasks.clone();
    let mut index = 0;
    for task in &tasks {
        for (name, sub) in runner.expand(task) {
            index += 1;
            let stem = format!("{index:02}-{}", name.replace('/', "-"));
            let report = runner.run_task(&name, &sub, &out_dir, &stem)?;
            let file = format!("{stem}.json");
            write_text(
                &out_dir.join(&file),
                &output::to_json_pretty(&report).expect("report"),
            )?;
            rows.extend(report.checks.iter().cloned());
            entries.push(TaskEntry {
                name,
                kind: sub.kind().to_string(),
                file,
                pass: report.pass,
            });
        }
    }
    let mut csv = Vec::new();
    output::write_summary_csv(&mut csv, &rows).expect("in-memory write");
    write_bytes(&out_dir.join("summary.csv"), &csv)?;

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config_path.display().to_string(),
        config_digest: runner.digest.clone(),
        model: model_path.display().to_string(),
        seed: runner.cfg.simulation.seed,
        reps: runner.cfg.simulation.reps,
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        all_pass: entries.iter().all(|e| e.pass),
        tasks: entries,
    };
    write_text(
        &out_dir.join("manifest.json"),
        &output::to_json_pretty(&manifest).expect("manifest"),
    )?;
    Ok(RunOutcome { out_dir, manifest })
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    write_bytes(path, text.as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    fs::write(path, bytes).map_err(|e| RunError::io(path, e))
}

struct Runner {
    cfg: ExperimentConfig,
    params: ModelParams,
    digest: String,
    mu: Population,
    grid_config: Option<GridConfig>,
    grid: Option<Arc<ValueGrid>>,
}

fn row(
    task: &str,
    kind: &str,
    check: &str,
    e: &Estimate,
    target: f64,
    band: f64,
    pass: bool,
) -> SummaryRow {
    SummaryRow {
        task: task.to_string(),
        kind: kind.to_string(),
        check: check.to_string(),
        estimate: e.mean,
        stderr: e.stderr,
        target,
        band,
        pass,
    }
}

impl Runner {
    fn new(cfg: ExperimentConfig, params: ModelParams, digest: String) -> Result<Self, RunError> {
        let v = &cfg.validation;
        let report = params.validate(&params.probe_lattice(v.lo, v.hi, v.points));
        if !report.is_empty() {
            return Err(RunError::Validation(format!(
                "model violates {} invariant(s), first: {:?}",
                report.violations.len(),
                report.violations[0]
            )));
        }
        let d = params.dim();
        if let Some(x) = cfg.simulation.initial.iter().find(|x| x.len() != d) {
            return Err(RunError::Validation(format!(
                "initial position {x:?} does not have dimension {d}"
            )));
        }
        let grid_config = match &cfg.grid {
            None => None,
            Some(g) => {
                let gc = match g.n_t {
                    Some(n_t) => GridConfig::new(
                        g.x_lo,
                        g.x_hi,
                        g.n_x,
                        n_t,
                        cfg.simulation.horizon,
                        g.boundary,
                    )?,
                    None => GridConfig::with_cfl(
                        &params,
                        g.x_lo,
                        g.x_hi,
                        g.n_x,
                        cfg.simulation.horizon,
                        g.boundary,
                    )?,
                };
                gc.check_cfl(&params)?;
                Some(gc)
            }
        };
        let mu = if cfg.simulation.initial.len() == 1 {
            Population::single(cfg.simulation.initial[0].clone())
        } else {
            Population::siblings(cfg.simulation.initial.iter().cloned())
        };
        Ok(Runner {
            cfg,
            params,
            digest,
            mu,
            grid_config,
            grid: None,
        })
    }

    fn mc(&self) -> McConfig {
        let s = &self.cfg.simulation;
        let mut sim = SimConfig::new(s.step, s.horizon);
        sim.max_population = s.max_population;
        McConfig::new(s.reps, s.seed, sim)
    }

    fn grid(&mut self) -> Result<Arc<ValueGrid>, RunError> {
        if let Some(g) = &self.grid {
            return Ok(g.clone());
        }
        let gc = self
            .grid_config
            .as_ref()
            .ok_or_else(|| RunError::Validation("a [grid] section is required".into()))?;
        let g = Arc::new(hjb::solve(&self.params, gc)?);
        self.grid = Some(g.clone());
        Ok(g)
    }

    fn policy(&mut self, spec: &PolicySpec) -> Result<Policy, RunError> {
        let p = match spec {
            PolicySpec::Feedback if self.params.num_controls() == 1 => Policy::Constant(0),
            PolicySpec::Feedback => extract_feedback(self.grid()?),
            PolicySpec::Constant(a) => Policy::Constant(*a),
            PolicySpec::Schedule(s) => {
                if s.is_empty() {
                    return Err(RunError::Validation("empty schedule".into()));
                }
                Policy::OpenLoopTable(crate::policy::OpenLoopTable::new(Schedule::new(s.clone())))
            }
        };
        if p.max_control() >= self.params.num_controls() {
            return Err(RunError::Validation(format!(
                "policy {} uses a control outside the model's {} controls",
                p.describe(),
                self.params.num_controls()
            )));
        }
        Ok(p)
    }

    /// Task list entry to `(name, task)` pairs; `verify-all` expands.
    fn expand(&self, task: &TaskSpec) -> Vec<(String, TaskSpec)> {
        let name = task.name().unwrap_or(task.kind()).to_string();
        let TaskSpec::VerifyAll { allowance, .. } = task else {
            return vec![(name, task.clone())];
        };
        let s = &self.cfg.simulation;
        let x0 = s.initial[0].clone();
        let mid = 0.5 * (s.t0 + s.horizon);
        let positions = if s.initial.len() >= 2 {
            s.initial.clone()
        } else {
            vec![x0.clone(), x0.iter().map(|v| v + 0.5).collect()]
        };
        let bump = TestFunction::GaussianBump {
            level: 0.2,
            amplitude: 0.6,
            center: x0.clone(),
            width: 1.0,
            decay: 0.0,
        };
        let mut dpp_policies = Vec::new();
        if self.params.num_controls() > 1 {
            dpp_policies.push(PolicySpec::Feedback);
        }
        dpp_policies.extend((0..self.params.num_controls()).map(PolicySpec::Constant));
        let sub = vec![
            (
                "solve",
                TaskSpec::Solve {
                    name: None,
                    expect: None,
                    export: true,
                    convergence_levels: 0,
                    boundary_check: true,
                },
            ),
            (
                "estimate",
                TaskSpec::Estimate {
                    name: None,
                    policy: PolicySpec::Feedback,
                    expect: None,
                    allowance: *allowance,
                    pde_probes: s.initial.iter().map(|x| x[0]).collect(),
                    dump_path: false,
                },
            ),
            (
                "branching",
                TaskSpec::Branching {
                    name: None,
                    positions: Some(positions),
                    policy: PolicySpec::Feedback,
                },
            ),
            (
                "moment",
                TaskSpec::Moment {
                    name: None,
                    policy: PolicySpec::Feedback,
                },
            ),
            (
                "dynkin",
                TaskSpec::Dynkin {
                    name: None,
                    functions: vec![bump],
                    times: vec![mid],
                    bias_constant: default_bias(),
                    policy: PolicySpec::Feedback,
                },
            ),
            (
                "dpp",
                TaskSpec::Dpp {
                    name: None,
                    policies: dpp_policies,
                    stopping: vec![
                        StoppingRule::Fixed(mid),
                        StoppingRule::FirstEventOr(s.horizon),
                    ],
                    allowance: *allowance,
                    optimal: PolicySpec::Feedback,
                    suboptimal: None,
                },
            ),
            (
                "couple",
                TaskSpec::Couple {
                    name: None,
                    ladder: vec![0.1, 0.01, 0.001],
                    min_success: default_min_success(),
                    policy: PolicySpec::Feedback,
                },
            ),
        ];
        sub.into_iter()
            .map(|(k, t)| (format!("{name}/{k}"), t))
            .collect()
    }

    fn run_task(
        &mut self,
        name: &str,
        task: &TaskSpec,
        out_dir: &Path,
        stem: &str,
    ) -> Result<TaskReport, RunError> {
        let kind = task.kind();
        let mc = self.mc();
        let t0 = self.cfg.simulation.t0;
        let horizon = self.cfg.simulation.horizon;
        let mut checks = Vec::new();
        #[allow(clippy::needless_late_init)]
        let details: serde_json::Value;
        match task {
            TaskSpec::Solve {
                expect,
                export,
                convergence_levels,
                boundary_check,
                ..
            } => {
                let grid = self.grid()?;
                let gc = self.grid_config.clone().expect("grid config");
                let clamp = grid.clamp_count();
                checks.push(SummaryRow {
                    task: name.into(),
                    kind: kind.into(),
                    check: "clamp-count".into(),
                    estimate: clamp as f64,
                    stderr: 0.0,
                    target: 0.0,
                    band: 0.0,
                    pass: clamp == 0,
                });
                let n0 = grid.nearest_layer(t0)?;
                let layer = grid.layer(n0);
                let interior = &layer[1..layer.len() - 1];
                if let Some(e) = expect {
                    let worst = interior
                        .iter()
                        .map(|u| (u - e.value).abs())
                        .fold(0.0, f64::max);
                    checks.push(SummaryRow {
                        task: name.into(),
                        kind: kind.into(),
                        check: "interior-max-deviation".into(),
                        estimate: worst,
                        stderr: 0.0,
                        target: e.value,
                        band: e.tolerance,
                        pass: worst <= e.tolerance,
                    });
                }
                let convergence = if *convergence_levels > 0 {
                    let diffs = hjb::self_convergence(&self.params, &gc, *convergence_levels)?;
                    let decreasing = diffs.windows(2).all(|w| w[1] < w[0]);
                    checks.push(SummaryRow {
                        task: name.into(),
                        kind: kind.into(),
                        check: "self-convergence".into(),
                        estimate: *diffs.last().unwrap_or(&0.0),
                        stderr: 0.0,
                        target: 0.0,
                        band: diffs.first().copied().unwrap_or(0.0),
                        pass: decreasing,
                    });
                    Some(diffs)
                } else {
                    None
                };
                let probes: Vec<f64> = self.cfg.simulation.initial.iter().map(|x| x[0]).collect();
                let sensitivity = if *boundary_check {
                    let s = hjb::boundary_sensitivity(&self.params, &gc, &probes)?;
                    checks.push(SummaryRow {
                        task: name.into(),
                        kind: kind.into(),
                        check: "boundary-sensitivity".into(),
                        estimate: s,
                        stderr: 0.0,
                        target: 0.0,
                        band: 1e-3,
                        pass: s <= 1e-3,
                    });
                    Some(s)
                } else {
                    None
                };
                if *export {
                    let mut buf = Vec::new();
                    output::write_grid_csv(&mut buf, &grid).expect("in-memory write");
                    write_bytes(&out_dir.join(format!("{stem}-grid.csv")), &buf)?;
                }
                let values: Vec<f64> = probes
                    .iter()
                    .map(|&x| grid.evaluate(t0, x))
                    .collect::<Result<_, _>>()?;
                details = serde_json::json!({
                    "grid": gc,
                    "cfl_number": gc.cfl_number(&self.params)?,
                    "clamp_count": clamp,
                    "degenerate_diffusion": grid.degenerate_diffusion(),
                    "probes": probes,
                    "values": values,
                    "self_convergence": convergence,
                    "boundary_sensitivity": sensitivity,
                });
            }
            TaskSpec::Estimate {
                policy,
                expect,
                allowance,
                pde_probes,
                dump_path,
                ..
            } => {
                let policy = self.policy(policy)?;
                let summaries = replication_summaries(t0, &self.mu, &policy, &self.params, &mc)?;
                let costs: Vec<f64> = summaries.iter().map(|s| s.cost).collect();
                let est = Estimate::from_samples(&costs, mc.seed_base);
                let mut buf = Vec::new();
                output::write_replications_jsonl(&mut buf, &summaries).expect("in-memory write");
                write_bytes(&out_dir.join(format!("{stem}-replications.jsonl")), &buf)?;
                if *dump_path {
                    let path = simulate(
                        t0,
                        &self.mu,
                        &policy,
                        &self.params,
                        &mc.sim.clone().recording(),
                        mc.seed_base,
                    )?;
                    let mut buf = Vec::new();
                    output::write_path_csv(&mut buf, &path).expect("in-memory write");
                    write_bytes(&out_dir.join(format!("{stem}-path.csv")), &buf)?;
                }
                match expect {
                    Some(v) => checks.push(row(
                        name,
                        kind,
                        "expected-value",
                        &est,
                        *v,
                        3.0 * est.stderr + allowance,
                        est.within(*v, *allowance),
                    )),
                    None => checks.push(row(name, kind, "value", &est, f64::NAN, f64::NAN, true)),
                }
                let agreement = if pde_probes.is_empty() {
                    None
                } else {
                    let grid = self.grid()?;
                    let rows = mc_pde_agreement(
                        t0,
                        pde_probes,
                        &policy,
                        &self.params,
                        &grid,
                        &mc,
                        *allowance,
                    )?;
                    for r in &rows {
                        checks.push(row(
                            name,
                            kind,
                            &format!("pde-agreement@{}", r.x),
                            &r.mc,
                            r.pde,
                            r.band,
                            r.pass,
                        ));
                    }
                    Some(rows)
                };
                details = serde_json::json!({
                    "policy": policy.describe(),
                    "estimate": est,
                    "pde_agreement": agreement,
                });
            }
            TaskSpec::Branching {
                positions, policy, ..
            } => {
                let policy = self.policy(policy)?;
                let positions = positions
                    .clone()
                    .unwrap_or_else(|| self.cfg.simulation.initial.clone());
                let r = check_branching(t0, &positions, &policy, &self.params, &mc)?;
                checks.push(row(
                    name,
                    kind,
                    "multi-vs-product",
                    &r.multi,
                    r.product,
                    r.band,
                    r.pass,
                ));
                details = serde_json::to_value(&r).expect("report");
            }
            TaskSpec::Moment { policy, .. } => {
                let policy = self.policy(policy)?;
                let summaries = replication_summaries(t0, &self.mu, &policy, &self.params, &mc)?;
                let r = moment_check(
                    &summaries,
                    &self.params,
                    self.mu.len(),
                    t0,
                    horizon,
                    mc.seed_base,
                )?;
                checks.push(row(
                    name,
                    kind,
                    "sup-population",
                    &r.sup_population,
                    r.bound,
                    3.0 * r.sup_population.stderr,
                    r.pass,
                ));
                details = serde_json::to_value(&r).expect("report");
            }
            TaskSpec::Dynkin {
                functions,
                times,
                bias_constant,
                policy,
                ..
            } => {
                let policy = self.policy(policy)?;
                let mut reports = Vec::new();
                let mut k = 0usize;
                for (fi, u) in functions.iter().enumerate() {
                    for &s in times {
                        let sub = mc.reseeded(mc.seed_base.wrapping_add((k * mc.reps) as u64));
                        k += 1;
                        let r = dynkin_residual(
                            u,
                            t0,
                            &self.mu,
                            &policy,
                            &self.params,
                            s,
                            &sub,
                            *bias_constant,
                        )?;
                        checks.push(row(
                            name,
                            kind,
                            &format!("residual[f{fi},s={s}]"),
                            &r.residual,
                            0.0,
                            r.band,
                            r.pass,
                        ));
                        reports.push(serde_json::json!({"function": u, "time": s, "report": r}));
                    }
                }
                details = serde_json::Value::Array(reports);
            }
            TaskSpec::Dpp {
                policies,
                stopping,
                allowance,
                optimal,
                suboptimal,
                ..
            } => {
                let grid = self.grid()?;
                let mut reports = Vec::new();
                let mut k = 0usize;
                let mut run_one = |this: &mut Runner,
                                   spec: &PolicySpec,
                                   tau: StoppingRule,
                                   label: &str,
                                   checks: &mut Vec<SummaryRow>|
                 -> Result<_, RunError> {
                    let policy = this.policy(spec)?;
                    let sub = mc.reseeded(mc.seed_base.wrapping_add((k * mc.reps) as u64));
                    k += 1;
                    let r = dpp_check(
                        t0,
                        &this.mu,
                        &policy,
                        &this.params,
                        tau,
                        &grid,
                        &sub,
                        *allowance,
                    )?;
                    let tag = format!("{label}[{},{}]", r.policy, stopping_tag(tau));
                    let pass = match label {
                        "lower-bound" => r.lower_bound_ok,
                        "near-optimal" => r.near_optimal,
                        _ => r.slack > 3.0 * r.estimate.stderr,
                    };
                    let band = if label == "suboptimal" {
                        3.0 * r.estimate.stderr
                    } else {
                        r.band
                    };
                    checks.push(row(name, kind, &tag, &r.estimate, r.baseline, band, pass));
                    Ok(r)
                };
                for spec in policies {
                    for &tau in stopping {
                        reports.push(run_one(self, spec, tau, "lower-bound", &mut checks)?);
                    }
                }
                for &tau in stopping {
                    reports.push(run_one(self, optimal, tau, "near-optimal", &mut checks)?);
                }
                if let Some(bad) = suboptimal {
                    let tau = StoppingRule::Fixed(horizon);
                    reports.push(run_one(self, bad, tau, "suboptimal", &mut checks)?);
                }
                details = serde_json::to_value(&reports).expect("report");
            }
            TaskSpec::Couple {
                ladder,
                min_success,
                policy,
                ..
            } => {
                let policy = self.policy(policy)?;
                let delta = self.cfg.simulation.coupling_delta;
                let mut reports = Vec::new();
                for &eps in ladder {
                    let tilde = self
                        .params
                        .perturbed(eps)
                        .map_err(|e| RunError::Validation(e.to_string()))?;
                    let distance = self.params.perturbation_distance(&tilde);
                    let r =
                        coupling_success(t0, &self.mu, &policy, &self.params, &tilde, delta, &mc)?;
                    reports
                        .push(serde_json::json!({"eps": eps, "distance": distance, "report": r}));
                    let est = Estimate {
                        mean: r.rate,
                        stderr: r.stderr,
                        n: r.n,
                        seed_base: mc.seed_base,
                    };
                    checks.push(row(
                        name,
                        kind,
                        &format!("success@{eps}"),
                        &est,
                        f64::NAN,
                        f64::NAN,
                        true,
                    ));
                }
                let rates: Vec<f64> = reports
                    .iter()
                    .map(|r| r["report"]["rate"].as_f64().unwrap_or(f64::NAN))
                    .collect();
                let nondecreasing = rates.windows(2).all(|w| w[1] >= w[0]);
                let finest = *rates.last().expect("non-empty ladder");
                let summary = Estimate {
                    mean: finest,
                    stderr: 0.0,
                    n: mc.reps,
                    seed_base: mc.seed_base,
                };
                checks.push(row(
                    name,
                    kind,
                    "nondecreasing",
                    &summary,
                    f64::NAN,
                    f64::NAN,
                    nondecreasing,
                ));
                checks.push(row(
                    name,
                    kind,
                    "finest-success",
                    &summary,
                    *min_success,
                    0.0,
                    finest >= *min_success,
                ));
                details = serde_json::json!({"delta": delta, "levels": reports, "nondecreasing": nondecreasing});
            }
            TaskSpec::VerifyAll { .. } => unreachable!("expanded before running"),
        }
        Ok(TaskReport {
            name: name.to_string(),
            kind: kind.to_string(),
            config_digest: self.digest.clone(),
            seed_base: mc.seed_base,
            reps: mc.reps,
            pass: checks.iter().all(|c| c.pass),
            checks,
            details,
        })
    }
}

fn stopping_tag(tau: StoppingRule) -> String {
    match tau {
        StoppingRule::Fixed(s) => format!("fixed {s}"),
        StoppingRule::FirstEventOr(s) => format!("first-event or {s}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MODEL: &str = r#"
dim = 1
noise_dim = 1
gamma_bar = 1.0
mean_offspring_bound = 1.0
max_offspring = 2
terminal_cost = { family = "constant", value = 0.0 }

[[control]]
index = 0
drift = [{ family = "constant", value = 0.0 }]
diffusion = [[{ family = "constant", value = 0.0 }]]
death_rate = { family = "constant", value = 1.0 }
offspring = [{ family = "constant", value = 0.5 }, { family = "constant", value = 0.0 }, { family = "remainder" }]
running_cost = { family = "constant", value = 0.0 }
"#;

    fn experiment(tasks: &str, grid: &str) -> String {
        format!(
            r#"
model = "model.toml"
[simulation]
horizon = 2.0
step = 0.05
reps = 200
seed = 5
initial = [[0.0]]
{grid}
{tasks}
"#
        )
    }

    fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("model.toml"), MODEL).unwrap();
        let path = dir.path().join("exp.toml");
        fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn unknown_keys_rejected_with_position() {
        let err = ExperimentConfig::from_toml_str(
            &experiment("[[task]]\nkind = \"moment\"\ncolour = 1", ""),
            "x.toml",
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), exit::USAGE);
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn policy_spec_forms_parse() {
        #[derive(Deserialize)]
        struct W {
            p: Vec<PolicySpec>,
        }
        let w: W = toml::from_str(
            r#"p = ["feedback", { constant = 1 }, { schedule = [[0.0, 0], [0.5, 1]] }]"#,
        )
        .unwrap();
        assert_eq!(
            w.p,
            vec![
                PolicySpec::Feedback,
                PolicySpec::Constant(1),
                PolicySpec::Schedule(vec![(0.0, 0), (0.5, 1)])
            ]
        );
    }

    #[test]
    fn grid_required_for_solve() {
        let err =
            ExperimentConfig::from_toml_str(&experiment("[[task]]\nkind = \"solve\"", ""), "x")
                .unwrap_err();
        assert!(err.to_string().contains("[grid]"));
    }

    #[test]
    fn cfl_violation_is_a_validation_error() {
        let grid = "[grid]\nx_lo = -1.0\nx_hi = 1.0\nn_x = 11\nn_t = 1";
        let (dir, path) = setup(&experiment("[[task]]\nkind = \"solve\"", grid));
        let err = run(
            &path,
            &RunOptions {
                out: Some(dir.path().join("out")),
                ..Default::default()
            },
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), exit::VALIDATION);
        assert!(err.to_string().contains("CFL"), "{err}");
    }

    #[test]
    fn missing_model_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        fs::write(&path, experiment("[[task]]\nkind = \"moment\"", "")).unwrap();
        let err = run(&path, &RunOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), exit::IO);
    }

    #[test]
    fn run_writes_artifacts_and_is_reproducible() {
        let grid = "[grid]\nx_lo = -2.0\nx_hi = 2.0\nn_x = 21\nn_t = 4000";
        let tasks = "[[task]]\nkind = \"solve\"\nexpect = { value = 0.5, tolerance = 1e-3 }\n\n[[task]]\nkind = \"estimate\"\nexpect = 0.5\ndump_path = true\n\n[[task]]\nkind = \"moment\"";
        let (dir, path) = setup(&experiment(tasks, grid));
        let out1 = dir.path().join("a");
        let out2 = dir.path().join("b");
        let r1 = run(
            &path,
            &RunOptions {
                out: Some(out1.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        run(
            &path,
            &RunOptions {
                out: Some(out2.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r1.manifest.all_pass, "{:?}", r1.manifest);
        assert_eq!(r1.exit_code(), exit::OK);
        for e in &r1.manifest.tasks {
            let a = fs::read(out1.join(&e.file)).unwrap();
            let b = fs::read(out2.join(&e.file)).unwrap();
            assert_eq!(a, b, "{}", e.file);
        }
        assert_eq!(
            fs::read(out1.join("summary.csv")).unwrap(),
            fs::read(out2.join("summary.csv")).unwrap()
        );
        assert!(out1.join("01-solve-grid.csv").exists());
        assert!(out1.join("02-estimate-path.csv").exists());
        let jsonl = fs::read_to_string(out1.join("02-estimate-replications.jsonl")).unwrap();
        assert_eq!(jsonl.lines().count(), 200);
        assert!(jsonl.lines().next().unwrap().contains("\"supN\""));
    }

    #[test]
    fn overrides_change_seed_and_digest() {
        let (dir, path) = setup(&experiment("[[task]]\nkind = \"moment\"", ""));
        let a = run(
            &path,
            &RunOptions {
                out: Some(dir.path().join("a")),
                ..Default::default()
            },
        )
        .unwrap();
        let b = run(
            &path,
            &RunOptions {
                out: Some(dir.path().join("b")),
                seed: Some(99),
                reps: Some(150),
            },
        )
        .unwrap();
        assert_eq!(b.manifest.seed, 99);
        assert_eq!(b.manifest.reps, 150);
        assert_ne!(a.manifest.config_digest, b.manifest.config_digest);
    }
}

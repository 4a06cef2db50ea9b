//! Model coefficients for a controlled branching diffusion.
//!
//! Every coefficient is a declarative [`CoefficientSpec`] so that a model can be
//! read from a file, perturbed numerically and compared in sup-norm. A model
//! holds one coefficient bundle per control point of a finite [`ControlSet`];
//! the terminal map `g` is shared by all controls.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `sum_k p_k(x, a) = 1`.
pub const PROBABILITY_TOLERANCE: f64 = 1e-12;

/// Index of a control point in the model's [`ControlSet`].
pub type ControlIndex = usize;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse model file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("parameter sets are not comparable: {0}")]
    Mismatch(String),
}

/// Scalar coefficient family evaluated on `R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoefficientSpec {
    /// `value`
    Constant { value: f64 },
    /// `offset + slope . x`, optionally clipped to `[lower, upper]`.
    Affine {
        offset: f64,
        slope: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lower: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        upper: Option<f64>,
    },
    /// `base + amplitude * exp(-|x - center|^2 / (2 width^2))`
    GaussianBump {
        base: f64,
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
    },
    /// `low + (high - low) / (1 + exp(-slope . (x - center)))`
    Logistic {
        low: f64,
        high: f64,
        center: Vec<f64>,
        slope: Vec<f64>,
    },
    /// Only valid as one entry of an offspring list: `1 - sum of the others`.
    Remainder,
}

impl CoefficientSpec {
    pub fn constant(value: f64) -> Self {
        CoefficientSpec::Constant { value }
    }

    pub fn gaussian_bump(base: f64, amplitude: f64, center: Vec<f64>, width: f64) -> Self {
        CoefficientSpec::GaussianBump {
            base,
            amplitude,
            center,
            width,
        }
    }

    /// Evaluates the family at `x`. `Remainder` evaluates to NaN; the owning
    /// offspring list resolves it.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            CoefficientSpec::Constant { value } => *value,
            CoefficientSpec::Affine {
                offset,
                slope,
                lower,
                upper,
            } => {
                let mut v = offset + dot(slope, x);
                if let Some(lo) = lower {
                    v = v.max(*lo);
                }
                if let Some(hi) = upper {
                    v = v.min(*hi);
                }
                v
            }
            CoefficientSpec::GaussianBump {
                base,
                amplitude,
                center,
                width,
            } => {
                let r2: f64 = x.iter().zip(center).map(|(xi, ci)| (xi - ci).powi(2)).sum();
                base + amplitude * (-r2 / (2.0 * width * width)).exp()
            }
            CoefficientSpec::Logistic {
                low,
                high,
                center,
                slope,
            } => {
                let z: f64 = x
                    .iter()
                    .zip(center)
                    .zip(slope)
                    .map(|((xi, ci), si)| si * (xi - ci))
                    .sum();
                low + (high - low) / (1.0 + (-z).exp())
            }
            CoefficientSpec::Remainder => f64::NAN,
        }
    }

    /// Closed-form `sup_x |self(x) - other(x)|` when both specs share a family
    /// and shape; `None` when no closed form is available.
    pub fn sup_distance(&self, other: &CoefficientSpec) -> Option<f64> {
        use CoefficientSpec::*;
        match (self, other) {
            (Constant { value: a }, Constant { value: b }) => Some((a - b).abs()),
            (
                Affine {
                    offset: o1,
                    slope: s1,
                    lower: l1,
                    upper: u1,
                },
                Affine {
                    offset: o2,
                    slope: s2,
                    lower: l2,
                    upper: u2,
                },
            ) if s1 == s2 && l1.is_none() && l2.is_none() && u1.is_none() && u2.is_none() => {
                Some((o1 - o2).abs())
            }
            (
                GaussianBump {
                    base: b1,
                    amplitude: a1,
                    center: c1,
                    width: w1,
                },
                GaussianBump {
                    base: b2,
                    amplitude: a2,
                    center: c2,
                    width: w2,
                },
            ) if c1 == c2 && w1 == w2 => {
                // difference is db + da * phi with phi ranging over (0, 1]
                let db = b1 - b2;
                let da = a1 - a2;
                Some(db.abs().max((db + da).abs()))
            }
            (
                Logistic {
                    low: l1,
                    high: h1,
                    center: c1,
                    slope: s1,
                },
                Logistic {
                    low: l2,
                    high: h2,
                    center: c2,
                    slope: s2,
                },
            ) if c1 == c2 && s1 == s2 => Some((l1 - l2).abs().max((h1 - h2).abs())),
            _ if self == other => Some(0.0),
            _ => None,
        }
    }

    /// Shifts the family vertically by `delta` (used to build perturbed models).
    pub fn shifted(&self, delta: f64) -> CoefficientSpec {
        use CoefficientSpec::*;
        match self.clone() {
            Constant { value } => Constant {
                value: value + delta,
            },
            Affine {
                offset,
                slope,
                lower,
                upper,
            } => Affine {
                offset: offset + delta,
                slope,
                lower: lower.map(|v| v + delta),
                upper: upper.map(|v| v + delta),
            },
            GaussianBump {
                base,
                amplitude,
                center,
                width,
            } => GaussianBump {
                base: base + delta,
                amplitude,
                center,
                width,
            },
            Logistic {
                low,
                high,
                center,
                slope,
            } => Logistic {
                low: low + delta,
                high: high + delta,
                center,
                slope,
            },
            Remainder => Remainder,
        }
    }

    fn check_dim(&self, dim: usize, what: &str) -> Result<(), ModelError> {
        let bad = |len: usize| {
            Err(ModelError::Invalid(format!(
                "{what}: vector of length {len} does not match dimension {dim}"
            )))
        };
        match self {
            CoefficientSpec::Affine { slope, .. } if slope.len() != dim => bad(slope.len()),
            CoefficientSpec::GaussianBump { center, width, .. } => {
                if center.len() != dim {
                    bad(center.len())
                } else if *width <= 0.0 || !width.is_finite() {
                    Err(ModelError::Invalid(format!(
                        "{what}: width must be positive"
                    )))
                } else {
                    Ok(())
                }
            }
            CoefficientSpec::Logistic { center, slope, .. } => {
                if center.len() != dim {
                    bad(center.len())
                } else if slope.len() != dim {
                    bad(slope.len())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    fn is_remainder(&self) -> bool {
        matches!(self, CoefficientSpec::Remainder)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One element of the finite control set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub index: ControlIndex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Vec<f64>>,
}

/// Finite ordered control set with indices `0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSet {
    elements: Vec<ControlPoint>,
}

impl ControlSet {
    pub fn new(mut elements: Vec<ControlPoint>) -> Result<Self, ModelError> {
        if elements.is_empty() {
            return Err(ModelError::Invalid("control set is empty".into()));
        }
        elements.sort_by_key(|e| e.index);
        for (pos, e) in elements.iter().enumerate() {
            if e.index != pos {
                return Err(ModelError::Invalid(format!(
                    "control indices must be 0..{} without duplicates (found {})",
                    elements.len(),
                    e.index
                )));
            }
        }
        Ok(ControlSet { elements })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, a: ControlIndex) -> Option<&ControlPoint> {
        self.elements.get(a)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ControlPoint> {
        self.elements.iter()
    }
}

/// Coefficients attached to one control point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlCoefficients {
    pub index: ControlIndex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Vec<f64>>,
    /// `d` entries.
    pub drift: Vec<CoefficientSpec>,
    /// `d` rows of `m` entries.
    pub diffusion: Vec<Vec<CoefficientSpec>>,
    pub death_rate: CoefficientSpec,
    /// `K_off + 1` entries for `p_0 .. p_{K_off}`; at most one may be `remainder`.
    pub offspring: Vec<CoefficientSpec>,
    pub running_cost: CoefficientSpec,
}

/// On-disk form of a model; see `docs/schema.md`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dim: usize,
    pub noise_dim: usize,
    pub gamma_bar: f64,
    pub mean_offspring_bound: f64,
    #[serde(default)]
    pub lipschitz: f64,
    pub max_offspring: usize,
    pub terminal_cost: CoefficientSpec,
    pub control: Vec<ControlCoefficients>,
}

/// Validated coefficient bundle `(b, sigma, gamma, (p_k), c, g)` with bounds.
///
/// Structural checks (dimensions, control indices, offspring list length) run
/// at construction. Pointwise invariants are checked by [`ModelParams::validate`]
/// at probe points, since they cannot be decided for arbitrary families.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    name: Option<String>,
    dim: usize,
    noise_dim: usize,
    gamma_bar: f64,
    mean_offspring_bound: f64,
    lipschitz: f64,
    max_offspring: usize,
    terminal_cost: CoefficientSpec,
    controls: Vec<ControlCoefficients>,
    control_set: ControlSet,
}

impl ModelParams {
    pub fn from_file_model(file: ModelFile) -> Result<Self, ModelError> {
        let ModelFile {
            name,
            dim,
            noise_dim,
            gamma_bar,
            mean_offspring_bound,
            lipschitz,
            max_offspring,
            terminal_cost,
            mut control,
        } = file;
        if dim == 0 {
            return Err(ModelError::Invalid("dim must be positive".into()));
        }
        if noise_dim == 0 {
            return Err(ModelError::Invalid("noise_dim must be positive".into()));
        }
        if !(gamma_bar > 0.0 && gamma_bar.is_finite()) {
            return Err(ModelError::Invalid(
                "gamma_bar must be positive and finite".into(),
            ));
        }
        if !(mean_offspring_bound >= 0.0 && mean_offspring_bound.is_finite()) {
            return Err(ModelError::Invalid(
                "mean_offspring_bound must be nonnegative and finite".into(),
            ));
        }
        if terminal_cost.is_remainder() {
            return Err(ModelError::Invalid(
                "terminal_cost cannot be a remainder".into(),
            ));
        }
        terminal_cost.check_dim(dim, "terminal_cost")?;
        control.sort_by_key(|c| c.index);
        let control_set = ControlSet::new(
            control
                .iter()
                .map(|c| ControlPoint {
                    index: c.index,
                    payload: c.payload.clone(),
                })
                .collect(),
        )?;
        for c in &control {
            let tag = |what: &str| format!("control {}: {what}", c.index);
            if c.drift.len() != dim {
                return Err(ModelError::Invalid(tag(&format!(
                    "drift has {} entries, expected {dim}",
                    c.drift.len()
                ))));
            }
            if c.diffusion.len() != dim || c.diffusion.iter().any(|row| row.len() != noise_dim) {
                return Err(ModelError::Invalid(tag(&format!(
                    "diffusion must be {dim} x {noise_dim}"
                ))));
            }
            if c.offspring.len() != max_offspring + 1 {
                return Err(ModelError::Invalid(tag(&format!(
                    "offspring has {} entries, expected max_offspring + 1 = {}",
                    c.offspring.len(),
                    max_offspring + 1
                ))));
            }
            if c.offspring.iter().filter(|p| p.is_remainder()).count() > 1 {
                return Err(ModelError::Invalid(tag(
                    "at most one offspring entry may be a remainder",
                )));
            }
            let scalars = c
                .drift
                .iter()
                .chain(c.diffusion.iter().flatten())
                .chain([&c.death_rate, &c.running_cost]);
            for spec in scalars {
                if spec.is_remainder() {
                    return Err(ModelError::Invalid(tag(
                        "remainder is only valid in offspring",
                    )));
                }
                spec.check_dim(dim, &tag("coefficient"))?;
            }
            for spec in &c.offspring {
                spec.check_dim(dim, &tag("offspring"))?;
            }
        }
        Ok(ModelParams {
            name,
            dim,
            noise_dim,
            gamma_bar,
            mean_offspring_bound,
            lipschitz,
            max_offspring,
            terminal_cost,
            controls: control,
            control_set,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = toml::from_str(text)?;
        Self::from_file_model(file)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_file_model(&self) -> ModelFile {
        ModelFile {
            name: self.name.clone(),
            dim: self.dim,
            noise_dim: self.noise_dim,
            gamma_bar: self.gamma_bar,
            mean_offspring_bound: self.mean_offspring_bound,
            lipschitz: self.lipschitz,
            max_offspring: self.max_offspring,
            terminal_cost: self.terminal_cost.clone(),
            control: self.controls.clone(),
        }
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    pub fn gamma_bar(&self) -> f64 {
        self.gamma_bar
    }
    pub fn mean_offspring_bound(&self) -> f64 {
        self.mean_offspring_bound
    }
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
    pub fn max_offspring(&self) -> usize {
        self.max_offspring
    }
    pub fn control_set(&self) -> &ControlSet {
        &self.control_set
    }
    pub fn num_controls(&self) -> usize {
        self.controls.len()
    }
    pub fn coefficients(&self, a: ControlIndex) -> &ControlCoefficients {
        &self.controls[a]
    }
    pub fn terminal_spec(&self) -> &CoefficientSpec {
        &self.terminal_cost
    }

    /// Returns a copy with the coefficients of control `a` replaced.
    pub fn with_control(&self, coefficients: ControlCoefficients) -> Result<Self, ModelError> {
        let mut file = self.to_file_model();
        let a = coefficients.index;
        match file.control.iter_mut().find(|c| c.index == a) {
            Some(slot) => *slot = coefficients,
            None => return Err(ModelError::Invalid(format!("no control with index {a}"))),
        }
        Self::from_file_model(file)
    }

    /// Returns a copy with a different terminal map.
    pub fn with_terminal_cost(&self, g: CoefficientSpec) -> Result<Self, ModelError> {
        let mut file = self.to_file_model();
        file.terminal_cost = g;
        Self::from_file_model(file)
    }

    /// Perturbation of size `eps` spread over drift, death rate and offspring:
    /// every drift component moves by `eps / 3`, the death rate by `-eps / 3`,
    /// and mass `eps / 3` moves from the last offspring entry to `p_0` (a
    /// remainder entry absorbs it instead when present). Diffusion, costs and
    /// bounds are untouched.
    pub fn perturbed(&self, eps: f64) -> Result<Self, ModelError> {
        let mut file = self.to_file_model();
        let s = eps / 3.0;
        for c in &mut file.control {
            for b in &mut c.drift {
                *b = b.shifted(s);
            }
            c.death_rate = c.death_rate.shifted(-s);
            let last = c.offspring.len() - 1;
            let has_rest = c.offspring.iter().any(CoefficientSpec::is_remainder);
            if !c.offspring[0].is_remainder() {
                c.offspring[0] = c.offspring[0].shifted(s);
                if !has_rest && last > 0 {
                    c.offspring[last] = c.offspring[last].shifted(-s);
                }
            }
        }
        Self::from_file_model(file)
    }

    pub fn drift_into(&self, x: &[f64], a: ControlIndex, out: &mut [f64]) {
        for (o, spec) in out.iter_mut().zip(&self.controls[a].drift) {
            *o = spec.eval(x);
        }
    }

    /// Row-major `d x m` diffusion matrix.
    pub fn diffusion_into(&self, x: &[f64], a: ControlIndex, out: &mut [f64]) {
        let m = self.noise_dim;
        for (r, row) in self.controls[a].diffusion.iter().enumerate() {
            for (c, spec) in row.iter().enumerate() {
                out[r * m + c] = spec.eval(x);
            }
        }
    }

    pub fn death_rate(&self, x: &[f64], a: ControlIndex) -> f64 {
        self.controls[a].death_rate.eval(x)
    }

    pub fn running_cost(&self, x: &[f64], a: ControlIndex) -> f64 {
        self.controls[a].running_cost.eval(x)
    }

    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.terminal_cost.eval(x)
    }

    /// Writes `p_0 .. p_{K_off}` into `out` (length `K_off + 1`).
    pub fn offspring_into(&self, x: &[f64], a: ControlIndex, out: &mut [f64]) {
        let specs = &self.controls[a].offspring;
        let mut rest = None;
        let mut total = 0.0;
        for (k, (o, spec)) in out.iter_mut().zip(specs).enumerate() {
            if spec.is_remainder() {
                rest = Some(k);
                *o = 0.0;
            } else {
                *o = spec.eval(x);
                total += *o;
            }
        }
        if let Some(k) = rest {
            out[k] = 1.0 - total;
        }
    }

    pub fn offspring(&self, x: &[f64], a: ControlIndex) -> Vec<f64> {
        let mut p = vec![0.0; self.max_offspring + 1];
        self.offspring_into(x, a, &mut p);
        p
    }

    pub fn mean_offspring(&self, x: &[f64], a: ControlIndex) -> f64 {
        self.offspring(x, a)
            .iter()
            .enumerate()
            .map(|(k, p)| k as f64 * p)
            .sum()
    }

    /// Scalar `sigma sigma^*` for `d = 1`, i.e. the sum of squares of the single row.
    pub fn diffusion_sq_1d(&self, x: f64, a: ControlIndex) -> f64 {
        self.controls[a].diffusion[0]
            .iter()
            .map(|s| s.eval(&[x]).powi(2))
            .sum()
    }

    /// Checks every pointwise invariant at each probe point.
    pub fn validate(&self, probes: &[(Vec<f64>, ControlIndex)]) -> ValidationReport {
        let mut violations = Vec::new();
        let mut p = vec![0.0; self.max_offspring + 1];
        for (point, (x, a)) in probes.iter().enumerate() {
            let a = *a;
            let mut push = |kind| {
                violations.push(Violation {
                    point,
                    control: a,
                    kind,
                })
            };
            if x.len() != self.dim {
                push(ViolationKind::Dimension { got: x.len() });
                continue;
            }
            if a >= self.controls.len() {
                push(ViolationKind::UnknownControl);
                continue;
            }
            self.offspring_into(x, a, &mut p);
            let sum: f64 = p.iter().sum();
            if !sum.is_finite() || (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
                push(ViolationKind::ProbabilitySum { sum });
            }
            for (k, &pk) in p.iter().enumerate() {
                if !(pk >= 0.0) {
                    push(ViolationKind::NegativeProbability { k, value: pk });
                }
            }
            let mean: f64 = p.iter().enumerate().map(|(k, pk)| k as f64 * pk).sum();
            if !(mean <= self.mean_offspring_bound * (1.0 + PROBABILITY_TOLERANCE)) {
                push(ViolationKind::MeanOffspring {
                    mean,
                    bound: self.mean_offspring_bound,
                });
            }
            let rate = self.death_rate(x, a);
            if !(rate >= 0.0 && rate <= self.gamma_bar) {
                push(ViolationKind::RateBound {
                    rate,
                    gamma_bar: self.gamma_bar,
                });
            }
            let c = self.running_cost(x, a);
            if !(c >= 0.0 && c.is_finite()) {
                push(ViolationKind::RunningCost { value: c });
            }
            let g = self.terminal_cost(x);
            if !(0.0..=1.0).contains(&g) {
                push(ViolationKind::TerminalRange { value: g });
            }
            let mut b = vec![0.0; self.dim];
            self.drift_into(x, a, &mut b);
            let mut s = vec![0.0; self.dim * self.noise_dim];
            self.diffusion_into(x, a, &mut s);
            if b.iter().chain(&s).any(|v| !v.is_finite()) {
                push(ViolationKind::NonFinite);
            }
        }
        ValidationReport { violations }
    }

    /// Probe set: every control at `n` evenly spaced points per axis of
    /// `[lo, hi]^d` (at most 4096 points per control).
    pub fn probe_lattice(&self, lo: f64, hi: f64, n: usize) -> Vec<(Vec<f64>, ControlIndex)> {
        let n = n.max(2);
        let per_axis = {
            let mut k = n;
            while k > 2 && k.pow(self.dim as u32) > 4096 {
                k -= 1;
            }
            k
        };
        let total = per_axis.pow(self.dim as u32);
        let mut out = Vec::with_capacity(total * self.controls.len());
        for a in 0..self.controls.len() {
            for flat in 0..total {
                let mut rem = flat;
                let x = (0..self.dim)
                    .map(|_| {
                        let i = rem % per_axis;
                        rem /= per_axis;
                        lo + (hi - lo) * i as f64 / (per_axis - 1) as f64
                    })
                    .collect();
                out.push((x, a));
            }
        }
        out
    }

    /// Partition `I_0, .., I_{K_off}` of `[0, gamma(x, a))` with `|I_k| = gamma p_k`.
    pub fn offspring_intervals(&self, x: &[f64], a: ControlIndex) -> Vec<Interval> {
        let p = self.offspring(x, a);
        intervals_from(self.death_rate(x, a), &p)
    }

    /// Lebesgue measure of the overlap between the mark partitions of two
    /// parameter sets, including the common phantom segment near `gamma_bar`.
    pub fn interval_overlap(
        &self,
        x: &[f64],
        y: &[f64],
        a: ControlIndex,
        other: &ModelParams,
    ) -> Result<f64, ModelError> {
        self.check_comparable(other)?;
        let mine = self.offspring_intervals(x, a);
        let theirs = other.offspring_intervals(y, a);
        let branch: f64 = mine
            .iter()
            .zip(&theirs)
            .map(|(i, j)| i.intersection_len(j))
            .sum();
        let top_start = self.death_rate(x, a).max(other.death_rate(y, a));
        let top = (self.gamma_bar - top_start).max(0.0);
        Ok((branch + top).min(self.gamma_bar))
    }

    /// Requires equal `gamma_bar`, `K_off`, `d`, `m` and control count.
    pub fn check_comparable(&self, other: &ModelParams) -> Result<(), ModelError> {
        if self.gamma_bar != other.gamma_bar {
            return Err(ModelError::Mismatch(format!(
                "gamma_bar {} vs {}",
                self.gamma_bar, other.gamma_bar
            )));
        }
        if self.max_offspring != other.max_offspring {
            return Err(ModelError::Mismatch(format!(
                "max_offspring {} vs {}",
                self.max_offspring, other.max_offspring
            )));
        }
        if self.dim != other.dim || self.noise_dim != other.noise_dim {
            return Err(ModelError::Mismatch("dimensions differ".into()));
        }
        if self.controls.len() != other.controls.len() {
            return Err(ModelError::Mismatch("control sets differ".into()));
        }
        Ok(())
    }

    /// `max_a (|b - b~| + |sigma - sigma~| + |gamma - gamma~| + sum_k 2^-k |p_k - p~_k|)`
    /// in sup-norm. Vector and matrix coefficients use the sum of entrywise
    /// distances; a remainder entry uses the sum of the other entries'
    /// distances unless every entry is constant. `None` when some pair of
    /// specs has no closed-form distance.
    pub fn perturbation_distance(&self, other: &ModelParams) -> Option<f64> {
        if self.check_comparable(other).is_err() {
            return None;
        }
        let mut worst: f64 = 0.0;
        for (c1, c2) in self.controls.iter().zip(&other.controls) {
            let mut total = 0.0;
            for (s1, s2) in c1.drift.iter().zip(&c2.drift) {
                total += s1.sup_distance(s2)?;
            }
            for (s1, s2) in c1
                .diffusion
                .iter()
                .flatten()
                .zip(c2.diffusion.iter().flatten())
            {
                total += s1.sup_distance(s2)?;
            }
            total += c1.death_rate.sup_distance(&c2.death_rate)?;
            total += offspring_distance(&c1.offspring, &c2.offspring)?;
            worst = worst.max(total);
        }
        Some(worst)
    }
}

fn offspring_distance(p1: &[CoefficientSpec], p2: &[CoefficientSpec]) -> Option<f64> {
    let all_constant = p1.iter().chain(p2).all(|s| {
        matches!(
            s,
            CoefficientSpec::Constant { .. } | CoefficientSpec::Remainder
        )
    });
    if all_constant {
        let resolve = |specs: &[CoefficientSpec]| {
            let mut v: Vec<f64> = specs.iter().map(|s| s.eval(&[])).collect();
            let total: f64 = v.iter().filter(|x| !x.is_nan()).sum();
            for x in v.iter_mut().filter(|x| x.is_nan()) {
                *x = 1.0 - total;
            }
            v
        };
        let (v1, v2) = (resolve(p1), resolve(p2));
        return Some(
            v1.iter()
                .zip(&v2)
                .enumerate()
                .map(|(k, (a, b))| (a - b).abs() / 2f64.powi(k as i32))
                .sum(),
        );
    }
    let mut per_k = Vec::with_capacity(p1.len());
    let mut rest_k = None;
    for (k, (s1, s2)) in p1.iter().zip(p2).enumerate() {
        match (s1.is_remainder(), s2.is_remainder()) {
            (true, true) => {
                rest_k = Some(k);
                per_k.push(0.0);
            }
            (false, false) => per_k.push(s1.sup_distance(s2)?),
            _ => return None,
        }
    }
    if let Some(k) = rest_k {
        per_k[k] = per_k.iter().sum();
    }
    Some(
        per_k
            .iter()
            .enumerate()
            .map(|(k, d)| d / 2f64.powi(k as i32))
            .sum(),
    )
}

/// Builds the half-open partition of `[0, rate)` with cell lengths `rate * p_k`.
/// The last right endpoint is pinned to `rate`.
pub fn intervals_from(rate: f64, probs: &[f64]) -> Vec<Interval> {
    let mut out = Vec::with_capacity(probs.len());
    let mut cum = 0.0;
    let mut left = 0.0;
    for (k, p) in probs.iter().enumerate() {
        cum += p;
        let right = if k + 1 == probs.len() {
            rate
        } else {
            (rate * cum).min(rate)
        };
        let right = right.max(left);
        out.push(Interval {
            start: left,
            end: right,
        });
        left = right;
    }
    out
}

/// Half-open interval `[start, end)`; `start == end` marks an empty cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn len(&self) -> f64 {
        (self.end - self.start).max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, z: f64) -> bool {
        self.start <= z && z < self.end
    }

    pub fn intersection_len(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    /// Index into the probe list.
    pub point: usize,
    pub control: ControlIndex,
    pub kind: ViolationKind,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ViolationKind {
    ProbabilitySum { sum: f64 },
    NegativeProbability { k: usize, value: f64 },
    MeanOffspring { mean: f64, bound: f64 },
    RateBound { rate: f64, gamma_bar: f64 },
    RunningCost { value: f64 },
    TerminalRange { value: f64 },
    NonFinite,
    Dimension { got: usize },
    UnknownControl,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "all invariants hold");
        }
        for v in &self.violations {
            writeln!(f, "probe {} control {}: {:?}", v.point, v.control, v.kind)?;
        }
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn binary(rate: f64, gamma_bar: f64, p0: f64, p2: f64) -> ModelParams {
        constant_1d(
            0.0,
            0.0,
            rate,
            gamma_bar,
            &[p0, 0.0, p2],
            0.0,
            constant(0.0),
        )
    }

    fn kinds(r: &ValidationReport) -> Vec<&ViolationKind> {
        r.violations.iter().map(|v| &v.kind).collect()
    }

    #[test]
    fn critical_binary_validates() {
        let m = binary(1.0, 1.0, 0.5, 0.5);
        let report = m.validate(&m.probe_lattice(-3.0, 3.0, 7));
        assert!(report.is_empty(), "{report}");
    }

    #[test]
    fn probability_sum_violation_reported() {
        let m = binary(1.0, 1.0, 0.5, 0.4);
        let report = m.validate(&[(vec![0.0], 0)]);
        assert!(matches!(
            kinds(&report)[..],
            [ViolationKind::ProbabilitySum { .. }]
        ));
    }

    #[test]
    fn rate_bound_violation_reported() {
        let m = binary(2.0, 1.0, 0.5, 0.5);
        let report = m.validate(&[(vec![0.3], 0)]);
        assert!(matches!(
            kinds(&report)[..],
            [ViolationKind::RateBound { .. }]
        ));
    }

    #[test]
    fn mean_offspring_and_terminal_violations() {
        let mut file = binary(1.0, 1.0, 0.0, 1.0).to_file_model();
        file.mean_offspring_bound = 1.5;
        file.terminal_cost = constant(1.2);
        let m = ModelParams::from_file_model(file).unwrap();
        let report = m.validate(&[(vec![0.0], 0)]);
        let k = kinds(&report);
        assert_eq!(k.len(), 2);
        assert!(matches!(k[0], ViolationKind::MeanOffspring { .. }));
        assert!(matches!(k[1], ViolationKind::TerminalRange { .. }));
    }

    #[test]
    fn intervals_binary() {
        let m = binary(1.0, 1.0, 0.5, 0.5);
        let iv = m.offspring_intervals(&[0.0], 0);
        assert_eq!(
            iv,
            vec![
                Interval {
                    start: 0.0,
                    end: 0.5
                },
                Interval {
                    start: 0.5,
                    end: 0.5
                },
                Interval {
                    start: 0.5,
                    end: 1.0
                },
            ]
        );
        assert!(iv[1].is_empty());
    }

    #[test]
    fn intervals_zero_rate() {
        let m = binary(0.0, 1.0, 0.5, 0.5);
        let iv = m.offspring_intervals(&[0.0], 0);
        assert!(iv.iter().all(|i| i.is_empty()));
        assert_eq!(iv.iter().map(Interval::len).sum::<f64>(), 0.0);
    }

    #[test]
    fn intervals_scaled_by_rate() {
        let m = constant_1d(0.0, 0.0, 2.0, 2.0, &[0.25, 0.25, 0.5], 0.0, constant(0.0));
        let iv = m.offspring_intervals(&[1.0], 0);
        assert_eq!(
            iv,
            vec![
                Interval {
                    start: 0.0,
                    end: 0.5
                },
                Interval {
                    start: 0.5,
                    end: 1.0
                },
                Interval {
                    start: 1.0,
                    end: 2.0
                },
            ]
        );
    }

    #[test]
    fn overlap_identical_is_gamma_bar() {
        let m = binary(0.7, 1.0, 0.3, 0.7);
        let o = m.interval_overlap(&[0.2], &[0.2], 0, &m).unwrap();
        assert_eq!(o, 1.0);
    }

    #[test]
    fn overlap_hand_computed() {
        let m = binary(1.0, 1.0, 0.5, 0.5);
        let n = binary(1.0, 1.0, 0.4, 0.6);
        // [0,.5)∩[0,.4) = .4, [.5,1)∩[.4,1) = .5, top segments are points
        let o = m.interval_overlap(&[0.0], &[0.0], 0, &n).unwrap();
        assert!((o - 0.9).abs() < 1e-15);
        let dead = binary(0.0, 1.0, 0.5, 0.5);
        let o = m.interval_overlap(&[0.0], &[0.0], 0, &dead).unwrap();
        assert_eq!(o, 0.0);
    }

    #[test]
    fn overlap_rejects_mismatched_gamma_bar() {
        let m = binary(1.0, 1.0, 0.5, 0.5);
        let n = binary(1.0, 2.0, 0.5, 0.5);
        assert!(matches!(
            m.interval_overlap(&[0.0], &[0.0], 0, &n),
            Err(ModelError::Mismatch(_))
        ));
    }

    #[test]
    fn remainder_normalizes() {
        let mut file = binary(1.0, 1.0, 0.3, 0.0).to_file_model();
        file.control[0].offspring[2] = CoefficientSpec::Remainder;
        file.mean_offspring_bound = 1.4;
        let m = ModelParams::from_file_model(file).unwrap();
        let p = m.offspring(&[0.0], 0);
        assert_eq!(p[..2], [0.3, 0.0]);
        assert_eq!(p[2], 1.0 - 0.3);
        assert!(m.validate(&[(vec![5.0], 0)]).is_empty());
    }

    #[test]
    fn structural_errors() {
        let mut file = binary(1.0, 1.0, 0.5, 0.5).to_file_model();
        file.control[0].index = 3;
        assert!(ModelParams::from_file_model(file).is_err());
        let mut file = binary(1.0, 1.0, 0.5, 0.5).to_file_model();
        file.control[0].offspring.pop();
        assert!(ModelParams::from_file_model(file).is_err());
        let mut file = binary(1.0, 1.0, 0.5, 0.5).to_file_model();
        file.control[0].death_rate = CoefficientSpec::Remainder;
        assert!(ModelParams::from_file_model(file).is_err());
    }

    #[test]
    fn strict_parsing_rejects_unknown_keys() {
        let text = r#"
            dim = 1
            noise_dim = 1
            gamma_bar = 1.0
            mean_offspring_bound = 1.0
            max_offspring = 0
            terminal_cost = { family = "constant", value = 1.0 }
            colour = "blue"
            [[control]]
            index = 0
            drift = [{ family = "constant", value = 0.0 }]
            diffusion = [[{ family = "constant", value = 0.0 }]]
            death_rate = { family = "constant", value = 0.0 }
            offspring = [{ family = "remainder" }]
            running_cost = { family = "constant", value = 0.0 }
        "#;
        let err = ModelParams::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        let ok = text.replace("colour = \"blue\"", "");
        ModelParams::from_toml_str(&ok).unwrap();
        let bad_family = ok.replace("value = 1.0 }", "value = 1.0, width = 2.0 }");
        assert!(ModelParams::from_toml_str(&bad_family).is_err());
    }

    #[test]
    fn family_evaluations() {
        let bump = CoefficientSpec::gaussian_bump(0.1, 0.5, vec![1.0], 2.0);
        assert!((bump.eval(&[1.0]) - 0.6).abs() < 1e-15);
        assert!((bump.eval(&[3.0]) - (0.1 + 0.5 * (-0.5f64).exp())).abs() < 1e-15);
        let logistic = CoefficientSpec::Logistic {
            low: 0.2,
            high: 0.8,
            center: vec![0.0],
            slope: vec![3.0],
        };
        assert!((logistic.eval(&[0.0]) - 0.5).abs() < 1e-15);
        let affine = CoefficientSpec::Affine {
            offset: 1.0,
            slope: vec![2.0],
            lower: Some(0.0),
            upper: Some(2.0),
        };
        assert_eq!(affine.eval(&[-4.0]), 0.0);
        assert_eq!(affine.eval(&[0.25]), 1.5);
        assert_eq!(affine.eval(&[4.0]), 2.0);
    }

    #[test]
    fn sup_distance_closed_forms() {
        let a = CoefficientSpec::gaussian_bump(0.1, 0.5, vec![0.0], 1.0);
        let b = CoefficientSpec::gaussian_bump(0.2, 0.3, vec![0.0], 1.0);
        // difference -0.1 + 0.2 phi over phi in (0, 1]
        assert!((a.sup_distance(&b).unwrap() - 0.1).abs() < 1e-15);
        let e = CoefficientSpec::gaussian_bump(0.2, 0.7, vec![0.0], 1.0);
        assert!((a.sup_distance(&e).unwrap() - 0.3).abs() < 1e-15);
        let c = CoefficientSpec::gaussian_bump(0.2, 0.3, vec![1.0], 1.0);
        assert!(a.sup_distance(&c).is_none());
        assert_eq!(
            constant(0.3)
                .shifted(0.2)
                .sup_distance(&constant(0.3))
                .map(|d| (d - 0.2).abs() < 1e-15),
            Some(true)
        );
    }

    #[test]
    fn perturbation_distance_weights_offspring() {
        let m = binary(1.0, 1.0, 0.5, 0.5);
        let mut file = m.to_file_model();
        file.control[0].drift[0] = constant(0.01);
        file.control[0].death_rate = constant(0.98);
        file.control[0].offspring[0] = constant(0.54);
        file.control[0].offspring[2] = CoefficientSpec::Remainder;
        let n = ModelParams::from_file_model(file).unwrap();
        // 0.01 + 0.02 + 0.04 + 0.04 / 4
        let d = m.perturbation_distance(&n).unwrap();
        assert!((d - 0.08).abs() < 1e-12, "{d}");
    }

    proptest::proptest! {
        #[test]
        fn interval_lengths_sum_to_rate(rate in 0.0f64..3.0, raw in proptest::collection::vec(0.0f64..1.0, 1..6)) {
            let total: f64 = raw.iter().sum::<f64>().max(1e-9);
            let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
            let iv = intervals_from(rate, &probs);
            let sum: f64 = iv.iter().map(Interval::len).sum();
            proptest::prop_assert!((sum - rate).abs() <= 1e-12);
            proptest::prop_assert_eq!(iv[0].start, 0.0);
            for w in iv.windows(2) {
                proptest::prop_assert_eq!(w[0].end, w[1].start);
            }
            for (i, p) in iv.iter().zip(&probs) {
                proptest::prop_assert!((i.len() - rate * p).abs() <= 1e-12);
            }
        }

        #[test]
        fn overlap_symmetric(r1 in 0.0f64..1.0, r2 in 0.0f64..1.0, p in 0.0f64..1.0, q in 0.0f64..1.0, x in -2.0f64..2.0, y in -2.0f64..2.0) {
            let m = constant_1d(0.0, 0.0, r1, 1.0, &[p, 0.0, 1.0 - p], 0.0, constant(0.0));
            let n = constant_1d(0.0, 0.0, r2, 1.0, &[q, 0.0, 1.0 - q], 0.0, constant(0.0));
            let a = m.interval_overlap(&[x], &[y], 0, &n).unwrap();
            let b = n.interval_overlap(&[y], &[x], 0, &m).unwrap();
            proptest::prop_assert_eq!(a, b);
            proptest::prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn perturbed_model_distance() {
        let m = constant_1d(0.1, 0.5, 0.6, 1.0, &[0.5, 0.0, 0.5], 0.0, constant(0.5));
        let p = m.perturbed(0.03).unwrap();
        let d = m.perturbation_distance(&p).unwrap();
        assert!((d - (0.01 + 0.01 + 0.01 + 0.01 / 4.0)).abs() < 1e-12, "{d}");
        assert!(p.validate(&p.probe_lattice(-1.0, 1.0, 5)).is_empty());
    }

    #[test]
    fn overlap_deficit_vanishes_under_shrinking_perturbations() {
        let base = ModelParams::from_file_model(ModelFile {
            name: None,
            dim: 1,
            noise_dim: 1,
            gamma_bar: 1.0,
            mean_offspring_bound: 1.0,
            lipschitz: 1.0,
            max_offspring: 2,
            terminal_cost: constant(0.0),
            control: vec![ControlCoefficients {
                index: 0,
                payload: None,
                drift: vec![constant(0.0)],
                diffusion: vec![vec![constant(0.0)]],
                death_rate: CoefficientSpec::gaussian_bump(0.2, 0.6, vec![0.0], 1.0),
                offspring: vec![
                    CoefficientSpec::Logistic {
                        low: 0.2,
                        high: 0.6,
                        center: vec![0.0],
                        slope: vec![1.0],
                    },
                    constant(0.0),
                    CoefficientSpec::Remainder,
                ],
                running_cost: constant(0.0),
            }],
        })
        .unwrap();
        let mut prev = f64::INFINITY;
        for eps in [0.1, 0.01, 0.001, 0.0001] {
            let mut file = base.to_file_model();
            let c = &mut file.control[0];
            c.death_rate = c.death_rate.shifted(-eps);
            c.offspring[0] = c.offspring[0].shifted(eps);
            let pert = ModelParams::from_file_model(file).unwrap();
            let deficit = (0..41)
                .map(|i| {
                    let x = -2.0 + 0.1 * i as f64;
                    1.0 - base.interval_overlap(&[x], &[x + eps], 0, &pert).unwrap()
                })
                .fold(0.0f64, f64::max);
            assert!(deficit < prev, "eps {eps}: {deficit} !< {prev}");
            prev = deficit;
        }
        assert!(prev < 1e-3);
    }
}

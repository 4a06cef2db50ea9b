//! Explicit monotone finite-difference solver for the HJB equation
//! `u_t + min_a { G^a u - c^a u } = 0`, `u(T, .) = g`, in one space dimension.
//!
//! Time stepping runs backward from the terminal layer. The drift term is
//! upwinded per control before the minimum, the diffusion term uses the
//! centered second difference, and the zero-order branching term is
//! evaluated with `r` clamped to `[-1, 1]`. Under the CFL bound checked by
//! [`GridConfig::check_cfl`] every update is a nondecreasing function of the
//! previous layer, which is what makes the scheme monotone.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ControlIndex, ModelParams};

/// Values this far outside `[0, 1]` count as a clamp; smaller excursions are
/// floating-point rounding.
pub const CLAMP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum HjbError {
    #[error("CFL condition violated: dt * (sigma^2/dx^2 + |b|/dx + gamma_bar (M + 1) + c) = {value:.6} > 1 at x = {x}")]
    Cfl { value: f64, x: f64 },
    #[error("numerical failure: NaN in time layer {layer} at x = {x}")]
    NumericalFailure { layer: usize, x: f64 },
    #[error("the PDE solver requires dim = 1 (model has dim = {0})")]
    Dimension(usize),
    #[error("time {t} is outside [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },
    #[error("invalid grid: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryRule {
    /// Second difference dropped at the edge; the drift term is kept only when
    /// its upwind neighbour lies inside the grid.
    #[default]
    OneSided,
    /// Edge nodes evolve by the zero-order terms only.
    Frozen,
}

/// Space-time grid on `[0, horizon] x [x_lo, x_hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n_x: usize,
    pub n_t: usize,
    pub horizon: f64,
    #[serde(default)]
    pub boundary: BoundaryRule,
}

impl GridConfig {
    pub fn new(
        x_lo: f64,
        x_hi: f64,
        n_x: usize,
        n_t: usize,
        horizon: f64,
        boundary: BoundaryRule,
    ) -> Result<Self, HjbError> {
        let g = GridConfig {
            x_lo,
            x_hi,
            n_x,
            n_t,
            horizon,
            boundary,
        };
        g.check_shape()?;
        Ok(g)
    }

    /// Grid with the smallest `n_t` that satisfies the CFL bound for `params`.
    pub fn with_cfl(
        params: &ModelParams,
        x_lo: f64,
        x_hi: f64,
        n_x: usize,
        horizon: f64,
        boundary: BoundaryRule,
    ) -> Result<Self, HjbError> {
        let mut g = GridConfig::new(x_lo, x_hi, n_x, 1, horizon, boundary)?;
        let rate = g.cfl_rate(params)?.0;
        g.n_t = ((horizon * rate).ceil() as usize).max(1);
        // rounding in dt = T / n_t can land a hair above the bound
        while g.cfl_number(params)? > 1.0 {
            g.n_t += 1;
        }
        Ok(g)
    }

    fn check_shape(&self) -> Result<(), HjbError> {
        if !(self.x_lo.is_finite() && self.x_hi.is_finite() && self.x_lo < self.x_hi) {
            return Err(HjbError::Config("need finite x_lo < x_hi".into()));
        }
        if self.n_x < 3 {
            return Err(HjbError::Config("need n_x >= 3".into()));
        }
        if self.n_t == 0 {
            return Err(HjbError::Config("need n_t >= 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(HjbError::Config("horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / (self.n_x - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_t as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        if j + 1 == self.n_x {
            self.x_hi
        } else {
            self.x_lo + j as f64 * self.dx()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_x).map(|j| self.node(j)).collect()
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.n_t {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    /// Largest per-unit-time stencil weight over the nodes, and where it occurs.
    fn cfl_rate(&self, params: &ModelParams) -> Result<(f64, f64), HjbError> {
        if params.dim() != 1 {
            return Err(HjbError::Dimension(params.dim()));
        }
        let dx = self.dx();
        let zero_order = params.gamma_bar() * (params.mean_offspring_bound() + 1.0);
        let mut b = [0.0];
        let mut worst = (0.0, self.x_lo);
        for j in 0..self.n_x {
            let x = self.node(j);
            let (mut s2, mut drift, mut cost) = (0.0f64, 0.0f64, 0.0f64);
            for a in 0..params.num_controls() {
                s2 = s2.max(params.diffusion_sq_1d(x, a));
                params.drift_into(&[x], a, &mut b);
                drift = drift.max(b[0].abs());
                cost = cost.max(params.running_cost(&[x], a));
            }
            let rate = s2 / (dx * dx) + drift / dx + zero_order + cost;
            if rate > worst.0 || rate.is_nan() {
                worst = (rate, x);
            }
        }
        Ok(worst)
    }

    pub fn cfl_number(&self, params: &ModelParams) -> Result<f64, HjbError> {
        Ok(self.dt() * self.cfl_rate(params)?.0)
    }

    pub fn check_cfl(&self, params: &ModelParams) -> Result<(), HjbError> {
        self.check_shape()?;
        let (rate, x) = self.cfl_rate(params)?;
        let value = self.dt() * rate;
        if !(value <= 1.0) {
            return Err(HjbError::Cfl { value, x });
        }
        Ok(())
    }
}

/// Zero-order part of the generator: `gamma (sum_k p_k r^k - r)` with `r`
/// clamped to `[-1, 1]`.
pub fn generator_zero_order(params: &ModelParams, x: &[f64], a: ControlIndex, r: f64) -> f64 {
    let rate = params.death_rate(x, a);
    if rate == 0.0 {
        return 0.0;
    }
    let r = r.clamp(-1.0, 1.0);
    let p = params.offspring(x, a);
    rate * (polynomial(&p, r) - r)
}

fn polynomial(coeffs: &[f64], r: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * r + c)
}

/// `b.p + 1/2 tr(sigma sigma^* M) + G^a(x, r) - c r` for one control.
/// `hessian` is row-major `d x d`.
pub fn control_term(
    params: &ModelParams,
    x: &[f64],
    a: ControlIndex,
    r: f64,
    grad: &[f64],
    hessian: &[f64],
) -> f64 {
    let d = params.dim();
    let m = params.noise_dim();
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * m];
    params.drift_into(x, a, &mut b);
    params.diffusion_into(x, a, &mut s);
    b.iter().zip(grad).map(|(bi, pi)| bi * pi).sum::<f64>()
        + 0.5 * trace_sigma_sigma_t(&s, hessian, d, m)
        + generator_zero_order(params, x, a, r)
        - params.running_cost(x, a) * r
}

/// `min_a` of [`control_term`] with the argmin (lowest index on ties).
pub fn hamiltonian(
    params: &ModelParams,
    x: &[f64],
    r: f64,
    grad: &[f64],
    hessian: &[f64],
) -> (f64, ControlIndex) {
    let mut best = (f64::INFINITY, 0);
    for a in 0..params.num_controls() {
        let value = control_term(params, x, a, r, grad, hessian);
        if value < best.0 {
            best = (value, a);
        }
    }
    best
}

/// `tr(s s^T h)` for `s` of shape `d x m` and symmetric `h` of shape `d x d`.
pub(crate) fn trace_sigma_sigma_t(s: &[f64], h: &[f64], d: usize, m: usize) -> f64 {
    let mut tr = 0.0;
    for i in 0..d {
        for j in 0..d {
            let ss: f64 = (0..m).map(|k| s[i * m + k] * s[j * m + k]).sum();
            tr += ss * h[j * d + i];
        }
    }
    tr
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Edge {
    Interior,
    Left,
    Right,
}

/// One control's contribution to the discrete Hamiltonian at a node.
#[allow(clippy::too_many_arguments)]
#[inline]
fn stencil_term(
    params: &ModelParams,
    x: f64,
    a: ControlIndex,
    r: f64,
    d_plus: f64,
    d_minus: f64,
    d2: f64,
    edge: Edge,
    boundary: BoundaryRule,
) -> f64 {
    let xs = [x];
    let mut b = [0.0];
    params.drift_into(&xs, a, &mut b);
    let b = b[0];
    let transport = match (edge, boundary) {
        (_, BoundaryRule::Frozen) if edge != Edge::Interior => 0.0,
        (Edge::Interior, _) => {
            if b >= 0.0 {
                b * d_plus
            } else {
                b * d_minus
            }
        }
        (Edge::Left, _) => {
            if b >= 0.0 {
                b * d_plus
            } else {
                0.0
            }
        }
        (Edge::Right, _) => {
            if b < 0.0 {
                b * d_minus
            } else {
                0.0
            }
        }
    };
    let diffusion = if edge == Edge::Interior {
        0.5 * params.diffusion_sq_1d(x, a) * d2
    } else {
        0.0
    };
    transport + diffusion + generator_zero_order(params, &xs, a, r)
        - params.running_cost(&xs, a) * r
}

/// Solution of the HJB equation on a [`GridConfig`].
#[derive(Clone, Debug)]
pub struct ValueGrid {
    config: GridConfig,
    nodes: Vec<f64>,
    times: Vec<f64>,
    /// `values[n][j]` approximates `u(t_n, x_j)`.
    values: Vec<Vec<f64>>,
    /// Control attaining the minimum when stepping from layer `n + 1` to `n`;
    /// the terminal layer repeats the last decision.
    argmin: Vec<Vec<ControlIndex>>,
    params: Arc<ModelParams>,
    clamp_count: usize,
    degenerate_diffusion: bool,
}

impl ValueGrid {
    pub fn config(&self) -> &GridConfig {
        &self.config
    }
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn layer(&self, n: usize) -> &[f64] {
        &self.values[n]
    }
    pub fn layers(&self) -> &[Vec<f64>] {
        &self.values
    }
    pub fn argmin_layer(&self, n: usize) -> &[ControlIndex] {
        &self.argmin[n]
    }
    pub fn params(&self) -> &ModelParams {
        &self.params
    }
    pub fn shared_params(&self) -> Arc<ModelParams> {
        Arc::clone(&self.params)
    }
    /// Number of node updates that left `[0, 1]` by more than [`CLAMP_TOLERANCE`].
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }
    /// True when `sigma = 0` at some node for some control.
    pub fn degenerate_diffusion(&self) -> bool {
        self.degenerate_diffusion
    }
    pub fn horizon(&self) -> f64 {
        self.config.horizon
    }

    /// Bilinear interpolation in `(t, x)`; `x` is clamped to the grid.
    pub fn evaluate(&self, t: f64, x: f64) -> Result<f64, HjbError> {
        let (n, w) = self.time_position(t)?;
        let (j, v) = self.space_position(x);
        let lerp = |layer: &[f64]| layer[j] * (1.0 - v) + layer[j + 1] * v;
        let lower = lerp(&self.values[n]);
        let value = if w == 0.0 {
            lower
        } else {
            lower * (1.0 - w) + lerp(&self.values[n + 1]) * w
        };
        Ok(value.clamp(0.0, 1.0))
    }

    /// Index of the layer closest to `t`.
    pub fn nearest_layer(&self, t: f64) -> Result<usize, HjbError> {
        let (n, w) = self.time_position(t)?;
        Ok(if w > 0.5 { n + 1 } else { n })
    }

    fn time_position(&self, t: f64) -> Result<(usize, f64), HjbError> {
        let horizon = self.config.horizon;
        let slack = 1e-12 * horizon.max(1.0);
        if !(t >= -slack && t <= horizon + slack) {
            return Err(HjbError::Domain { t, horizon });
        }
        let s = (t.clamp(0.0, horizon) / self.config.dt()).max(0.0);
        let n = (s.floor() as usize).min(self.config.n_t - 1);
        let w = (s - n as f64).clamp(0.0, 1.0);
        Ok((n, w))
    }

    fn space_position(&self, x: f64) -> (usize, f64) {
        let c = &self.config;
        let x = x.clamp(c.x_lo, c.x_hi);
        let s = (x - c.x_lo) / c.dx();
        let j = (s.floor() as usize).min(c.n_x - 2);
        (j, (s - j as f64).clamp(0.0, 1.0))
    }

    /// Node-wise discrete derivatives of layer `n`: centered in the interior,
    /// one-sided first derivative and copied second derivative at the edges.
    fn node_derivatives(&self, n: usize, j: usize) -> (f64, f64) {
        let u = &self.values[n];
        let dx = self.config.dx();
        let last = self.config.n_x - 1;
        let second = |k: usize| (u[k + 1] - 2.0 * u[k] + u[k - 1]) / (dx * dx);
        match j {
            0 => ((u[1] - u[0]) / dx, second(1)),
            k if k == last => ((u[k] - u[k - 1]) / dx, second(k - 1)),
            k => ((u[k + 1] - u[k - 1]) / (2.0 * dx), second(k)),
        }
    }

    /// `(u, u_x, u_xx)` on layer `n` at `x`, linearly interpolated between nodes.
    pub fn interpolated_derivatives(&self, n: usize, x: f64) -> (f64, f64, f64) {
        let (j, v) = self.space_position(x);
        let u = &self.values[n];
        let r = u[j] * (1.0 - v) + u[j + 1] * v;
        let (p0, m0) = self.node_derivatives(n, j);
        let (p1, m1) = self.node_derivatives(n, j + 1);
        (r, p0 * (1.0 - v) + p1 * v, m0 * (1.0 - v) + m1 * v)
    }

    /// Feedback decision at `(t, x)`: Hamiltonian argmin on the nearest layer.
    pub fn feedback_control(&self, t: f64, x: f64) -> ControlIndex {
        if self.params.num_controls() == 1 {
            return 0;
        }
        let n = self
            .nearest_layer(t.clamp(0.0, self.config.horizon))
            .unwrap_or(0);
        let (r, p, m2) = self.interpolated_derivatives(n, x);
        let xc = x.clamp(self.config.x_lo, self.config.x_hi);
        hamiltonian(&self.params, &[xc], r, &[p], &[m2]).1
    }

    /// Rows `(t, x, u, argmin)` for every node of every layer.
    pub fn export_rows(&self) -> impl Iterator<Item = (f64, f64, f64, ControlIndex)> + '_ {
        self.values.iter().enumerate().flat_map(move |(n, layer)| {
            layer
                .iter()
                .enumerate()
                .map(move |(j, &u)| (self.times[n], self.nodes[j], u, self.argmin[n][j]))
        })
    }
}

/// Solves the HJB equation backward from `u(T, .) = g`.
pub fn solve(params: &ModelParams, grid: &GridConfig) -> Result<ValueGrid, HjbError> {
    march(params, grid, None)
}

/// Solves the linear-in-derivatives semilinear PDE `u_t + G^a u - c^a u = 0`
/// for a fixed control `a`, using the same stencil as [`solve`].
pub fn solve_semilinear(
    params: &ModelParams,
    control: ControlIndex,
    grid: &GridConfig,
) -> Result<ValueGrid, HjbError> {
    if control >= params.num_controls() {
        return Err(HjbError::Config(format!("unknown control {control}")));
    }
    march(params, grid, Some(control))
}

fn march(
    params: &ModelParams,
    grid: &GridConfig,
    fixed: Option<ControlIndex>,
) -> Result<ValueGrid, HjbError> {
    grid.check_cfl(params)?;
    let nodes = grid.nodes();
    let times: Vec<f64> = (0..=grid.n_t).map(|n| grid.time(n)).collect();
    let n_x = grid.n_x;
    let dx = grid.dx();
    let dt = grid.dt();
    let mut values = vec![vec![0.0; n_x]; grid.n_t + 1];
    let mut argmin = vec![vec![0; n_x]; grid.n_t + 1];
    values[grid.n_t] = nodes.iter().map(|&x| params.terminal_cost(&[x])).collect();

    let degenerate_diffusion = nodes
        .iter()
        .any(|&x| (0..params.num_controls()).any(|a| params.diffusion_sq_1d(x, a) == 0.0));

    let mut clamp_count = 0;
    for n in (0..grid.n_t).rev() {
        let (head, tail) = values.split_at_mut(n + 1);
        let next = &tail[0];
        let cur = &mut head[n];
        for j in 0..n_x {
            let edge = if j == 0 {
                Edge::Left
            } else if j + 1 == n_x {
                Edge::Right
            } else {
                Edge::Interior
            };
            let r = next[j];
            let d_plus = if j + 1 < n_x {
                (next[j + 1] - r) / dx
            } else {
                0.0
            };
            let d_minus = if j > 0 { (r - next[j - 1]) / dx } else { 0.0 };
            let d2 = if edge == Edge::Interior {
                (next[j + 1] - 2.0 * r + next[j - 1]) / (dx * dx)
            } else {
                0.0
            };
            let x = nodes[j];
            let (h, a_star) = match fixed {
                Some(a) => (
                    stencil_term(params, x, a, r, d_plus, d_minus, d2, edge, grid.boundary),
                    a,
                ),
                None => {
                    let mut best = (f64::INFINITY, 0);
                    for a in 0..params.num_controls() {
                        let v =
                            stencil_term(params, x, a, r, d_plus, d_minus, d2, edge, grid.boundary);
                        if v < best.0 {
                            best = (v, a);
                        }
                    }
                    best
                }
            };
            let mut u = r + dt * h;
            if u.is_nan() {
                return Err(HjbError::NumericalFailure { layer: n, x });
            }
            if !(-CLAMP_TOLERANCE..=1.0 + CLAMP_TOLERANCE).contains(&u) {
                clamp_count += 1;
            }
            u = u.clamp(0.0, 1.0);
            cur[j] = u;
            argmin[n][j] = a_star;
        }
    }
    if grid.n_t > 0 {
        let last = argmin[grid.n_t - 1].clone();
        argmin[grid.n_t] = last;
    }
    Ok(ValueGrid {
        config: grid.clone(),
        nodes,
        times,
        values,
        argmin,
        params: Arc::new(params.clone()),
        clamp_count,
        degenerate_diffusion,
    })
}

/// Sup-norm distances at `t = 0` between successive refinements, each level
/// halving `dx` and quartering `dt` (fixed parabolic ratio). Differences are
/// measured on the coarsest nodes.
pub fn self_convergence(
    params: &ModelParams,
    base: &GridConfig,
    levels: usize,
) -> Result<Vec<f64>, HjbError> {
    let coarse_nodes = base.nodes();
    let mut prev: Option<Vec<f64>> = None;
    let mut diffs = Vec::new();
    let mut grid = base.clone();
    for _ in 0..=levels {
        let sol = solve(params, &grid)?;
        let at_coarse: Vec<f64> = coarse_nodes
            .iter()
            .map(|&x| sol.evaluate(0.0, x))
            .collect::<Result<_, _>>()?;
        if let Some(p) = &prev {
            let d = p
                .iter()
                .zip(&at_coarse)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            diffs.push(d);
        }
        prev = Some(at_coarse);
        grid.n_x = 2 * (grid.n_x - 1) + 1;
        grid.n_t *= 4;
    }
    Ok(diffs)
}

/// Largest change of `u(0, x)` at `probes` when the domain is widened by half
/// its width on each side at the same resolution.
pub fn boundary_sensitivity(
    params: &ModelParams,
    grid: &GridConfig,
    probes: &[f64],
) -> Result<f64, HjbError> {
    let base = solve(params, grid)?;
    let width = grid.x_hi - grid.x_lo;
    let mut wide = grid.clone();
    wide.x_lo -= width / 2.0;
    wide.x_hi += width / 2.0;
    wide.n_x = 2 * (grid.n_x - 1) + 1;
    let wide = solve(params, &wide)?;
    let mut worst: f64 = 0.0;
    for &x in probes {
        worst = worst.max((base.evaluate(0.0, x)? - wide.evaluate(0.0, x)?).abs());
    }
    Ok(worst)
}

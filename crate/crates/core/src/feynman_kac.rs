//! Feynman-Kac estimators for the unit-diffusion operator
//! `½Δ + b̃·∇ + u`, plus a Crank-Nicolson reference solver in one dimension.
//!
//! Backward problems are solved pointwise, `f(x, t) = E_x[e^{∫u} f_f(X_t)]`
//! with `dX = b̃ dt + dW`. Forward (Fokker-Planck) problems use a weighted
//! Gaussian kernel density estimate over terminal states. Drift-free
//! propagators are built from endpoint-pinned sine bridges:
//!
//! `K(y_f, y_i | t) = (2πt)^{-M/2} e^{-|y_f - y_i|²/2t} · E_bridge[e^{∫u(y_i + w_s) ds}]`.
//!
//! Path integrals of the potential use the left-endpoint sum `δ Σ_n u(y_n)`
//! by default; the trapezoid rule is available for bias studies. Log weights
//! are shifted by their maximum before exponentiation.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lamperti::TransformedModel;
use crate::paths::{BridgeBasis, FourierBridge, TimeGrid};
use crate::rng::{Domain, NormalStream, StreamKey};
use crate::sde::{guard, step_in_place, NoiseMode};
use crate::stats::{jackknife_ratio, pairwise_sum, summarize};

pub type DriftField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Largest tolerated fraction of divergent paths.
pub const MAX_DIVERGENT_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Kolmogorov backward: final condition `f_f`.
    Backward,
    /// Fokker-Planck: initial condition `f_0`.
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrature {
    #[default]
    LeftEndpoint,
    Trapezoid,
}

#[derive(Clone)]
pub struct FKProblem {
    dim: usize,
    horizon: f64,
    direction: Direction,
    drift: Option<DriftField>,
    potential: ScalarField,
    condition: ScalarField,
}

impl fmt::Debug for FKProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FKProblem")
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("direction", &self.direction)
            .field("has_drift", &self.drift.is_some())
            .finish()
    }
}

impl FKProblem {
    /// Drift-free, potential-free problem with the given terminal or initial condition.
    pub fn new(
        dim: usize,
        horizon: f64,
        direction: Direction,
        condition: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("problem dimension must be at least 1"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::input(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            dim,
            horizon,
            direction,
            drift: None,
            potential: Arc::new(|_| 0.0),
            condition: Arc::new(condition),
        })
    }

    pub fn backward(
        dim: usize,
        horizon: f64,
        condition: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::new(dim, horizon, Direction::Backward, condition)
    }

    pub fn forward(
        dim: usize,
        horizon: f64,
        condition: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::new(dim, horizon, Direction::Forward, condition)
    }

    pub fn with_drift(mut self, drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(drift));
        self
    }

    pub fn with_potential(mut self, u: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.potential = Arc::new(u);
        self
    }

    /// Takes drift and potential from a unit-diffusion frame. Map failures
    /// show up as non-finite drift and count as divergent paths.
    pub fn with_transformed_model(self, model: &TransformedModel) -> Result<Self> {
        if model.dim() != self.dim {
            return Err(Error::input("transformed model dimension differs from the problem"));
        }
        let d = model.clone();
        let p = model.clone();
        let dim = self.dim;
        Ok(self
            .with_drift(move |y, out| match d.drift(y) {
                Ok(v) => out.copy_from_slice(&v),
                Err(_) => out[..dim].fill(f64::NAN),
            })
            .with_potential(move |y| p.potential(y).unwrap_or(f64::NAN)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn has_drift(&self) -> bool {
        self.drift.is_some()
    }

    pub fn potential(&self, x: &[f64]) -> f64 {
        (self.potential)(x)
    }

    pub fn condition(&self, x: &[f64]) -> f64 {
        (self.condition)(x)
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.drift {
            Some(d) => d(x, out),
            None => out.fill(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PropagatorEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub divergent_paths: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleOptions {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub quadrature: Quadrature,
}

impl EnsembleOptions {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64) -> Self {
        Self {
            n_paths,
            n_steps,
            seed,
            quadrature: Quadrature::LeftEndpoint,
        }
    }

    pub fn with_quadrature(mut self, quadrature: Quadrature) -> Self {
        self.quadrature = quadrature;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(Error::input("need at least two paths"));
        }
        if self.n_steps == 0 {
            return Err(Error::input("need at least one time step"));
        }
        Ok(())
    }
}

/// Outcome of one simulated path: log weight `∫u ds`, terminal state, and the
/// state at the observation index (if one was requested).
struct PathRecord {
    log_weight: f64,
    terminal: Vec<f64>,
    observed: Option<Vec<f64>>,
}

/// Simulates member `member` from `start`. `None` marks a divergent path.
#[allow(clippy::too_many_arguments)]
fn run_path(
    problem: &FKProblem,
    start: &[f64],
    grid: &TimeGrid,
    key: &StreamKey,
    member: u64,
    quadrature: Quadrature,
    observe_at: Option<usize>,
    reverse_drift: bool,
) -> Option<PathRecord> {
    let m = start.len();
    let dt = grid.step();
    let mut lanes: Vec<NormalStream> = (0..m as u64).map(|j| key.lane(member, j)).collect();
    let sqrt_dt = dt.sqrt();
    let mut y = start.to_vec();
    let mut dw = vec![0.0; m];
    let mut buf = vec![0.0; m];
    let drift = |x: &[f64], out: &mut [f64]| {
        problem.drift_into(x, out);
        if reverse_drift {
            out.iter_mut().for_each(|v| *v = -*v);
        }
    };
    let mut observed = (observe_at == Some(0)).then(|| y.clone());
    let mut u_prev = problem.potential(&y);
    let mut acc = Vec::with_capacity(grid.n_steps());
    for n in 0..grid.n_steps() {
        for (w, lane) in dw.iter_mut().zip(lanes.iter_mut()) {
            *w = sqrt_dt * lane.next_normal();
        }
        step_in_place(&mut y, &drift, &mut buf, dt, &dw, NoiseMode::Additive).ok()?;
        guard(&y, n + 1).ok()?;
        let u_next = problem.potential(&y);
        acc.push(match quadrature {
            Quadrature::LeftEndpoint => u_prev,
            Quadrature::Trapezoid => 0.5 * (u_prev + u_next),
        });
        u_prev = u_next;
        if observe_at == Some(n + 1) {
            observed = Some(y.clone());
        }
    }
    let log_weight = dt * pairwise_sum(&acc);
    if !log_weight.is_finite() {
        return None;
    }
    Some(PathRecord {
        log_weight,
        terminal: y,
        observed,
    })
}

fn simulate_ensemble(
    problem: &FKProblem,
    starts: &(dyn Fn(u64) -> Vec<f64> + Sync),
    opts: &EnsembleOptions,
    observe_at: Option<usize>,
) -> Result<(Vec<(u64, PathRecord)>, usize)> {
    let grid = TimeGrid::uniform(problem.horizon, opts.n_steps)?;
    let key = StreamKey::new(opts.seed, Domain::Increments);
    let records: Vec<Option<PathRecord>> = (0..opts.n_paths as u64)
        .into_par_iter()
        .map(|i| run_path(problem, &starts(i), &grid, &key, i, opts.quadrature, observe_at, false))
        .collect();
    let divergent = records.iter().filter(|r| r.is_none()).count();
    if divergent as f64 > MAX_DIVERGENT_FRACTION * opts.n_paths as f64 {
        return Err(Error::Estimation(format!(
            "{divergent} of {} paths diverged (limit {:.1}%)",
            opts.n_paths,
            100.0 * MAX_DIVERGENT_FRACTION
        )));
    }
    let kept = records
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| r.map(|r| (i as u64, r)))
        .collect();
    Ok((kept, divergent))
}

fn max_log(records: &[(u64, PathRecord)]) -> f64 {
    records
        .iter()
        .map(|(_, r)| r.log_weight)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn check_point(problem: &FKProblem, x: &[f64]) -> Result<()> {
    if x.len() != problem.dim {
        return Err(Error::input(format!(
            "point has {} coordinates, problem dimension is {}",
            x.len(),
            problem.dim
        )));
    }
    Ok(())
}

/// Monte Carlo estimate of `f(x_eval, t)`.
pub fn solve_pointwise(problem: &FKProblem, x_eval: &[f64], opts: &EnsembleOptions) -> Result<PropagatorEstimate> {
    check_point(problem, x_eval)?;
    opts.validate()?;
    match problem.direction {
        Direction::Backward => solve_backward(problem, x_eval, opts),
        Direction::Forward => solve_forward(problem, x_eval, opts),
    }
}

fn solve_backward(problem: &FKProblem, x_eval: &[f64], opts: &EnsembleOptions) -> Result<PropagatorEstimate> {
    let start = x_eval.to_vec();
    let (records, divergent) = simulate_ensemble(problem, &|_| start.clone(), opts, None)?;
    let shift = max_log(&records);
    let values: Vec<f64> = records
        .iter()
        .map(|(_, r)| (r.log_weight - shift).exp() * problem.condition(&r.terminal))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Estimation(
            "terminal condition is not finite on sampled states".into(),
        ));
    }
    let s = summarize(&values)?;
    let scale = shift.exp();
    Ok(PropagatorEstimate {
        value: scale * s.mean,
        std_error: scale * s.std_error,
        n_paths: opts.n_paths,
        n_steps: opts.n_steps,
        divergent_paths: divergent,
    })
}

/// Proposal for forward starting points: independent normals centred at
/// `x_eval − t·b̃(x_eval)` with variance `1 + t` per coordinate.
fn solve_forward(problem: &FKProblem, x_eval: &[f64], opts: &EnsembleOptions) -> Result<PropagatorEstimate> {
    let m = problem.dim;
    if m > 3 {
        return Err(Error::Capability("forward density estimation supports M ≤ 3".into()));
    }
    let t = problem.horizon;
    let mut b = vec![0.0; m];
    problem.drift_into(x_eval, &mut b);
    let center: Vec<f64> = x_eval.iter().zip(&b).map(|(x, v)| x - t * v).collect();
    let spread = (1.0 + t).sqrt();
    let start_key = StreamKey::new(opts.seed, Domain::StartPoints);
    let start_of = |i: u64| -> Vec<f64> {
        center
            .iter()
            .enumerate()
            .map(|(j, c)| c + spread * start_key.lane(i, j as u64).next_normal())
            .collect()
    };
    let (records, divergent) = simulate_ensemble(problem, &start_of, opts, None)?;
    let log_q = |x: &[f64]| -> f64 {
        x.iter()
            .zip(&center)
            .map(|(xi, c)| -0.5 * ((xi - c) / spread).powi(2) - (spread * (2.0 * PI).sqrt()).ln())
            .sum()
    };
    // importance weight f_0(x_0)/q(x_0) times e^{∫u}
    let weights: Vec<f64> = records
        .iter()
        .map(|(i, r)| {
            let x0 = start_of(*i);
            problem.condition(&x0) * (r.log_weight - log_q(&x0)).exp()
        })
        .collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Estimation(
            "initial condition is not finite on sampled states".into(),
        ));
    }
    let bandwidth = silverman_bandwidth(&records, &weights, m)?;
    let norm: f64 = bandwidth.iter().map(|h| h * (2.0 * PI).sqrt()).product();
    let values: Vec<f64> = records
        .iter()
        .zip(&weights)
        .map(|((_, r), w)| {
            let q: f64 = r
                .terminal
                .iter()
                .zip(x_eval)
                .zip(&bandwidth)
                .map(|((xt, xe), h)| ((xt - xe) / h).powi(2))
                .sum();
            w * (-0.5 * q).exp() / norm
        })
        .collect();
    let s = summarize(&values)?;
    Ok(PropagatorEstimate {
        value: s.mean,
        std_error: s.std_error,
        n_paths: opts.n_paths,
        n_steps: opts.n_steps,
        divergent_paths: divergent,
    })
}

/// Per-coordinate Silverman bandwidth `σ̂_j (4 / ((M+2) n_eff))^{1/(M+4)}`,
/// using |weights| and the Kish effective sample size.
fn silverman_bandwidth(records: &[(u64, PathRecord)], weights: &[f64], m: usize) -> Result<Vec<f64>> {
    let abs: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
    let total = pairwise_sum(&abs);
    if !(total > 0.0) {
        return Err(Error::Estimation("all importance weights vanish".into()));
    }
    let sq: Vec<f64> = abs.iter().map(|w| w * w).collect();
    let n_eff = total * total / pairwise_sum(&sq);
    let factor = (4.0 / ((m as f64 + 2.0) * n_eff)).powf(1.0 / (m as f64 + 4.0));
    (0..m)
        .map(|j| {
            let xs: Vec<f64> = records.iter().zip(&abs).map(|((_, r), w)| w * r.terminal[j]).collect();
            let mean = pairwise_sum(&xs) / total;
            let vs: Vec<f64> = records
                .iter()
                .zip(&abs)
                .map(|((_, r), w)| w * (r.terminal[j] - mean).powi(2))
                .collect();
            let sd = (pairwise_sum(&vs) / total).sqrt();
            if !(sd > 0.0) {
                return Err(Error::Estimation("terminal states are degenerate".into()));
            }
            Ok(sd * factor)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeOptions {
    pub n_bridges: usize,
    pub n_steps: usize,
    pub n_modes: usize,
    pub seed: u64,
    pub quadrature: Quadrature,
}

impl BridgeOptions {
    pub fn new(n_bridges: usize, n_steps: usize, n_modes: usize, seed: u64) -> Self {
        Self {
            n_bridges,
            n_steps,
            n_modes,
            seed,
            quadrature: Quadrature::LeftEndpoint,
        }
    }
}

/// Drift-free propagator `K(y_f, y_i | t)` via pinned sine bridges.
pub fn propagator_free(
    problem: &FKProblem,
    y_i: &[f64],
    y_f: &[f64],
    opts: &BridgeOptions,
) -> Result<PropagatorEstimate> {
    if problem.has_drift() {
        return Err(Error::Capability(
            "propagator_free handles b̃ = 0 only; use solve_pointwise with density estimation".into(),
        ));
    }
    check_point(problem, y_i)?;
    check_point(problem, y_f)?;
    if opts.n_bridges < 2 {
        return Err(Error::input("need at least two bridges"));
    }
    let t = problem.horizon;
    let m = problem.dim;
    let endpoint: Vec<f64> = y_f.iter().zip(y_i).map(|(f, i)| f - i).collect();
    let dist2: f64 = endpoint.iter().map(|d| d * d).sum();
    let log_pref = -0.5 * m as f64 * (2.0 * PI * t).ln() - dist2 / (2.0 * t);
    let basis = BridgeBasis::new(t, opts.n_steps, opts.n_modes)?;
    let dt = t / opts.n_steps as f64;
    let logs: Vec<Option<f64>> = (0..opts.n_bridges as u64)
        .into_par_iter()
        .map(|i| {
            let bridge = FourierBridge::pinned(&endpoint, t, opts.n_modes, opts.seed, i).ok()?;
            let w = bridge.eval_on(&basis).ok()?;
            let us: Vec<f64> = w
                .chunks(m)
                .map(|ws| {
                    let y: Vec<f64> = ws.iter().zip(y_i).map(|(a, b)| a + b).collect();
                    problem.potential(&y)
                })
                .collect();
            let terms: Vec<f64> = match opts.quadrature {
                Quadrature::LeftEndpoint => us[..opts.n_steps].to_vec(),
                Quadrature::Trapezoid => us.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect(),
            };
            let l = dt * pairwise_sum(&terms);
            l.is_finite().then_some(l)
        })
        .collect();
    let divergent = logs.iter().filter(|l| l.is_none()).count();
    if divergent as f64 > MAX_DIVERGENT_FRACTION * opts.n_bridges as f64 {
        return Err(Error::Estimation(format!(
            "{divergent} bridges produced non-finite weights"
        )));
    }
    let logs: Vec<f64> = logs.into_iter().flatten().collect();
    let shift = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - shift).exp()).collect();
    let s = summarize(&weights)?;
    let scale = (log_pref + shift).exp();
    Ok(PropagatorEstimate {
        value: scale * s.mean,
        std_error: scale * s.std_error,
        n_paths: opts.n_bridges,
        n_steps: opts.n_steps,
        divergent_paths: divergent,
    })
}

/// `⟨O(x_s)⟩ = E(O(x_s) e^{∫₀ᵗ u}) / E(e^{∫₀ᵗ u})` over paths started at
/// `start`, both expectations on the same paths. Standard error by jackknife.
pub fn expectation_ratio(
    problem: &FKProblem,
    start: &[f64],
    s: f64,
    observable: &(dyn Fn(&[f64]) -> f64 + Sync),
    opts: &EnsembleOptions,
) -> Result<PropagatorEstimate> {
    check_point(problem, start)?;
    opts.validate()?;
    if !(0.0..=problem.horizon).contains(&s) {
        return Err(Error::input(format!(
            "observation time {s} outside [0, {}]",
            problem.horizon
        )));
    }
    let grid = TimeGrid::uniform(problem.horizon, opts.n_steps)?;
    let idx = grid.index_of(s)?;
    let start = start.to_vec();
    let (records, divergent) = simulate_ensemble(problem, &|_| start.clone(), opts, Some(idx))?;
    let shift = max_log(&records);
    let den: Vec<f64> = records.iter().map(|(_, r)| (r.log_weight - shift).exp()).collect();
    let num: Vec<f64> = records
        .iter()
        .zip(&den)
        .map(|((_, r), w)| w * observable(r.observed.as_deref().expect("observation index is on the grid")))
        .collect();
    let d = summarize(&den)?;
    if d.mean.abs() <= 3.0 * d.std_error {
        return Err(Error::IllConditionedRatio {
            denominator: d.mean,
            std_error: d.std_error,
        });
    }
    let (ratio, se) = jackknife_ratio(&num, &den)?;
    if !ratio.is_finite() {
        return Err(Error::Estimation("observable is not finite on sampled states".into()));
    }
    Ok(PropagatorEstimate {
        value: ratio,
        std_error: se,
        n_paths: opts.n_paths,
        n_steps: opts.n_steps,
        divergent_paths: divergent,
    })
}

/// Uniform spatial grid `x_min, x_min + dx, …, x_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_cells: usize,
}

impl SpaceGrid {
    pub fn new(x_min: f64, x_max: f64, n_cells: usize) -> Result<Self> {
        if !(x_max > x_min) || n_cells < 2 {
            return Err(Error::input("space grid needs x_max > x_min and at least two cells"));
        }
        Ok(Self { x_min, x_max, n_cells })
    }

    /// Grid on `[-half_width, half_width]` with spacing as close to `dx` as the width allows.
    pub fn symmetric(half_width: f64, dx: f64) -> Result<Self> {
        let n = (2.0 * half_width / dx).round() as usize;
        Self::new(-half_width, half_width, n)
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.n_cells as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_cells).map(|i| self.x_min + i as f64 * self.dx()).collect()
    }
}

/// Field on a [`SpaceGrid`] at the final time.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeSolution {
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
}

impl PdeSolution {
    /// Linear interpolation between nodes.
    pub fn value_at(&self, x: f64) -> Result<f64> {
        let n = self.xs.len();
        let (x0, x1) = (self.xs[0], self.xs[n - 1]);
        if !(x0..=x1).contains(&x) {
            return Err(Error::input(format!("{x} is outside the solution domain [{x0}, {x1}]")));
        }
        let pos = (x - x0) / (x1 - x0) * (n - 1) as f64;
        let i = (pos.floor() as usize).min(n - 2);
        let frac = pos - i as f64;
        Ok(self.values[i] * (1.0 - frac) + self.values[i + 1] * frac)
    }
}

/// Number of implicit-Euler half steps replacing the first Crank-Nicolson steps.
const RANNACHER_HALF_STEPS: usize = 4;

/// Crank-Nicolson reference solution on a truncated domain with zero
/// far-field values. Backward problems evolve `∂_τ f = ½f'' + b̃f' + uf` from
/// `f_f`; forward problems evolve `∂_t f = ½f'' − (b̃f)' + uf` from `f_0`.
/// The first two steps are replaced by four implicit-Euler half steps
/// (Rannacher start-up) so that narrow initial data do not ring.
pub fn pde_oracle_1d(problem: &FKProblem, space: &SpaceGrid, n_time_steps: usize) -> Result<PdeSolution> {
    if problem.dim != 1 {
        return Err(Error::Capability("the reference solver is one-dimensional".into()));
    }
    if n_time_steps == 0 {
        return Err(Error::input("need at least one time step"));
    }
    let xs = space.nodes();
    let n = xs.len();
    let dx = space.dx();
    let dt = problem.horizon / n_time_steps as f64;
    let mut b = vec![0.0; n];
    for (i, x) in xs.iter().enumerate() {
        let mut v = [0.0];
        problem.drift_into(&[*x], &mut v);
        b[i] = v[0];
    }
    let u: Vec<f64> = xs.iter().map(|x| problem.potential(&[*x])).collect();
    if b.iter().chain(&u).any(|v| !v.is_finite()) {
        return Err(Error::Oracle("drift or potential is not finite on the grid".into()));
    }
    if let Some(i) = (0..n).find(|&i| b[i].abs() * dx > 1.0) {
        return Err(Error::Oracle(format!(
            "cell Péclet number {:.3} > 2 at x = {}; refine the grid",
            2.0 * b[i].abs() * dx,
            xs[i]
        )));
    }
    let umax = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if umax * dt >= 1.0 {
        return Err(Error::Oracle(format!("u·δt = {} ≥ 1; take more time steps", umax * dt)));
    }
    // interior operator rows: lower, diagonal, upper
    let m = n - 2;
    let (mut lo, mut di, mut up) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let diff = 0.5 / (dx * dx);
    for k in 0..m {
        let i = k + 1;
        di[k] = -2.0 * diff + u[i];
        match problem.direction {
            Direction::Backward => {
                lo[k] = diff - b[i] / (2.0 * dx);
                up[k] = diff + b[i] / (2.0 * dx);
            }
            Direction::Forward => {
                lo[k] = diff + b[i - 1] / (2.0 * dx);
                up[k] = diff - b[i + 1] / (2.0 * dx);
            }
        }
    }
    let mut f: Vec<f64> = xs.iter().map(|x| problem.condition(&[*x])).collect();
    f[0] = 0.0;
    f[n - 1] = 0.0;
    let mut interior = f[1..n - 1].to_vec();
    let apply = |v: &[f64], k: usize| -> f64 {
        let left = if k > 0 { v[k - 1] } else { 0.0 };
        let right = if k + 1 < m { v[k + 1] } else { 0.0 };
        lo[k] * left + di[k] * v[k] + up[k] * right
    };
    let mut schedule: Vec<(f64, f64)> = Vec::new();
    let startup = n_time_steps.min(2);
    schedule.extend(std::iter::repeat_n((0.5 * dt, 1.0), 2 * startup));
    schedule.extend(std::iter::repeat_n((dt, 0.5), n_time_steps - startup));
    debug_assert!(RANNACHER_HALF_STEPS >= 2 * startup);
    for (h, theta) in schedule {
        // (I − θhL) f_new = (I + (1−θ)hL) f_old
        let rhs: Vec<f64> = (0..m)
            .map(|k| interior[k] + (1.0 - theta) * h * apply(&interior, k))
            .collect();
        let a: Vec<f64> = lo.iter().map(|v| -theta * h * v).collect();
        let d: Vec<f64> = di.iter().map(|v| 1.0 - theta * h * v).collect();
        let c: Vec<f64> = up.iter().map(|v| -theta * h * v).collect();
        interior = thomas(&a, &d, &c, &rhs)?;
    }
    f[1..n - 1].copy_from_slice(&interior);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Oracle("solution became non-finite".into()));
    }
    Ok(PdeSolution { xs, values: f })
}

/// Reference value of `K(y_f, y_i | t)` in one dimension. The point source
/// is replaced by the heat kernel at time `ε²`, `N(y_i, ε²)`, which is then
/// evolved by [`pde_oracle_1d`] over the remaining `t − ε²`. The error is of
/// order `ε²` times the drift and potential near `y_i`.
pub fn pde_propagator_1d(
    problem: &FKProblem,
    y_i: f64,
    y_f: f64,
    space: &SpaceGrid,
    n_time_steps: usize,
    width: f64,
) -> Result<f64> {
    let eps2 = width * width;
    if !(width > 0.0) || eps2 >= problem.horizon {
        return Err(Error::input("source width must be positive with ε² below the horizon"));
    }
    let norm = 1.0 / (2.0 * PI * eps2).sqrt();
    let shifted = FKProblem {
        horizon: problem.horizon - eps2,
        direction: Direction::Forward,
        condition: Arc::new(move |x: &[f64]| norm * (-(x[0] - y_i).powi(2) / (2.0 * eps2)).exp()),
        ..problem.clone()
    };
    pde_oracle_1d(&shifted, space, n_time_steps)?.value_at(y_f)
}

/// Tridiagonal solve; `a[0]` and `c[m-1]` are ignored.
fn thomas(a: &[f64], d: &[f64], c: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let m = d.len();
    let mut cp = vec![0.0; m];
    let mut dp = vec![0.0; m];
    let mut denom = d[0];
    if denom == 0.0 {
        return Err(Error::Oracle("singular tridiagonal system".into()));
    }
    cp[0] = c[0] / denom;
    dp[0] = rhs[0] / denom;
    for k in 1..m {
        denom = d[k] - a[k] * cp[k - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Oracle("singular tridiagonal system".into()));
        }
        cp[k] = c[k] / denom;
        dp[k] = (rhs[k] - a[k] * dp[k - 1]) / denom;
    }
    let mut x = vec![0.0; m];
    x[m - 1] = dp[m - 1];
    for k in (0..m - 1).rev() {
        x[k] = dp[k] - cp[k] * x[k + 1];
    }
    Ok(x)
}

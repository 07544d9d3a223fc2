//! Explicit Euler-Maruyama stepping with unit additive noise
//! (`Δy = δ b̃(y) + Δw`) or componentwise multiplicative noise
//! (`Δx = δ b(x) + x ⊙ Δw`).

use crate::error::{Error, Result};
use crate::paths::{BrownianPath, TimeGrid};

/// States with any component above this magnitude abort the simulation.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Additive,
    Multiplicative,
}

/// `(n_steps + 1) × M` states on a time grid; `states[0]` is the initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    dim: usize,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn from_states(grid: TimeGrid, dim: usize, states: Vec<f64>) -> Result<Self> {
        if dim == 0 || states.len() != dim * (grid.n_steps() + 1) {
            return Err(Error::input("trajectory shape does not match the grid"));
        }
        Ok(Self { grid, dim, states })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, t_idx: usize) -> &[f64] {
        &self.states[t_idx * self.dim..(t_idx + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.grid.n_steps())
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks(self.dim)
    }

    /// Largest componentwise difference to another trajectory on the same grid.
    pub fn max_abs_diff(&self, other: &Trajectory) -> Result<f64> {
        if self.states.len() != other.states.len() {
            return Err(Error::input("trajectories have different shapes"));
        }
        Ok(self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

fn check_step(dt: f64, state: &[f64], dw: &[f64]) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::input(format!("time step must be positive, got {dt}")));
    }
    if state.len() != dw.len() {
        return Err(Error::input("noise increment and state dimensions differ"));
    }
    Ok(())
}

/// In-place step shared by [`em_step_additive`], [`em_step_multiplicative`]
/// and the ensemble drivers. `drift_buf` must have the state's length.
#[inline]
pub(crate) fn step_in_place<F>(
    state: &mut [f64],
    drift: &F,
    drift_buf: &mut [f64],
    dt: f64,
    dw: &[f64],
    mode: NoiseMode,
) -> Result<()>
where
    F: Fn(&[f64], &mut [f64]) + ?Sized,
{
    drift(state, drift_buf);
    if drift_buf.iter().any(|b| !b.is_finite()) {
        return Err(Error::numeric("drift", state));
    }
    match mode {
        NoiseMode::Additive => {
            for ((x, b), w) in state.iter_mut().zip(drift_buf.iter()).zip(dw) {
                *x = *x + dt * b + w;
            }
        }
        NoiseMode::Multiplicative => {
            for ((x, b), w) in state.iter_mut().zip(drift_buf.iter()).zip(dw) {
                *x = *x + dt * b + *x * w;
            }
        }
    }
    Ok(())
}

/// `y + δ b̃(y) + Δw`.
pub fn em_step_additive<F>(y: &[f64], drift: &F, dt: f64, dw: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]) + ?Sized,
{
    check_step(dt, y, dw)?;
    let mut out = y.to_vec();
    let mut buf = vec![0.0; y.len()];
    step_in_place(&mut out, drift, &mut buf, dt, dw, NoiseMode::Additive)?;
    Ok(out)
}

/// `x + δ b(x) + x ⊙ Δw`.
pub fn em_step_multiplicative<F>(x: &[f64], drift: &F, dt: f64, dw: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]) + ?Sized,
{
    check_step(dt, x, dw)?;
    let mut out = x.to_vec();
    let mut buf = vec![0.0; x.len()];
    step_in_place(&mut out, drift, &mut buf, dt, dw, NoiseMode::Multiplicative)?;
    Ok(out)
}

/// Iterates the chosen Euler-Maruyama step along `path`.
pub fn simulate<F>(x0: &[f64], drift: &F, mode: NoiseMode, path: &BrownianPath) -> Result<Trajectory>
where
    F: Fn(&[f64], &mut [f64]) + ?Sized,
{
    let m = x0.len();
    if m != path.dim() {
        return Err(Error::input(format!(
            "initial state has {m} components, path has {}",
            path.dim()
        )));
    }
    let grid = *path.grid();
    let dt = grid.step();
    let n = grid.n_steps();
    let mut states = Vec::with_capacity(m * (n + 1));
    states.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut dw = vec![0.0; m];
    let mut buf = vec![0.0; m];
    for step in 0..n {
        path.increments_into(step, &mut dw);
        step_in_place(&mut x, drift, &mut buf, dt, &dw, mode)?;
        guard(&x, step + 1)?;
        states.extend_from_slice(&x);
    }
    Trajectory::from_states(grid, m, states)
}

#[inline]
pub(crate) fn guard(state: &[f64], step: usize) -> Result<()> {
    if state.iter().any(|v| !(v.abs() <= DIVERGENCE_THRESHOLD)) {
        return Err(Error::Divergence {
            step,
            threshold: DIVERGENCE_THRESHOLD,
        });
    }
    Ok(())
}

/// Itô solution of `dx = x dw`: `x0 · exp(w_t − t/2)`.
pub fn gbm_exact(x0: f64, w_t: f64, t: f64) -> f64 {
    x0 * (w_t - 0.5 * t).exp()
}

/// `log₂(e_i / e_{i+1})` for successive entries of an error ladder.
pub fn log2_ratios(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

//! Noise objects: Brownian increment grids, endpoint-pinned sine bridges and
//! periodic Brownian sheets.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::{Domain, StreamKey};

/// Default number of sine modes in a [`FourierBridge`]. The relative bias of
/// the truncated midpoint variance is about `4 / (π² K)`, i.e. ≈0.16% at 256.
pub const DEFAULT_BRIDGE_MODES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::input("time grid needs at least one step"));
        }
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(Error::input(format!(
                "time grid needs t_end > t_start, got [{t_start}, {t_end}]"
            )));
        }
        let grid = Self {
            t_start,
            t_end,
            n_steps,
        };
        if grid.step() <= 0.0 {
            return Err(Error::input("time step underflows to zero"));
        }
        Ok(grid)
    }

    /// Grid on `[0, horizon]`.
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        Self::new(0.0, horizon, n_steps)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn step(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    /// Time of grid node `idx`; the last node is `t_end` exactly.
    pub fn time(&self, idx: usize) -> f64 {
        if idx == self.n_steps {
            self.t_end
        } else {
            self.t_start + idx as f64 * self.step()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.time(i)).collect()
    }

    /// Grid with `factor` times fewer steps over the same interval.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(Error::input(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.n_steps
            )));
        }
        Self::new(self.t_start, self.t_end, self.n_steps / factor)
    }

    /// Index of the node at time `s`, if `s` lies on the grid (to 1e-9 relative).
    pub fn index_of(&self, s: f64) -> Result<usize> {
        let pos = (s - self.t_start) / self.step();
        let idx = pos.round();
        if idx < 0.0 || idx > self.n_steps as f64 || (pos - idx).abs() > 1e-9 * pos.abs().max(1.0) {
            return Err(Error::input(format!("time {s} is not a node of the grid")));
        }
        Ok(idx as usize)
    }
}

/// Independent `N(0, δ)` increments for `dim` coordinates over a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    dim: usize,
    grid: TimeGrid,
    // site-major: increments[site * n_steps + step]
    increments: Vec<f64>,
}

impl BrownianPath {
    /// Member 0 of the ensemble keyed by `seed`.
    pub fn sample(dim: usize, grid: TimeGrid, seed: u64) -> Result<Self> {
        Self::sample_member(dim, grid, seed, 0)
    }

    /// Ensemble member `member`. Each `(member, site)` owns a lane of the
    /// keyed generator and steps are consumed in order along it.
    pub fn sample_member(dim: usize, grid: TimeGrid, seed: u64, member: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("path dimension must be at least 1"));
        }
        let n = grid.n_steps();
        let scale = grid.step().sqrt();
        let key = StreamKey::new(seed, Domain::Increments);
        let mut increments = vec![0.0; dim * n];
        for (site, row) in increments.chunks_mut(n).enumerate() {
            key.lane(member, site as u64).fill(row, scale);
        }
        Ok(Self { dim, grid, increments })
    }

    pub fn zero(dim: usize, grid: TimeGrid) -> Self {
        Self {
            dim,
            grid,
            increments: vec![0.0; dim * grid.n_steps()],
        }
    }

    /// Wraps explicit increments laid out site-major (`[site][step]`).
    pub fn from_increments(dim: usize, grid: TimeGrid, increments: Vec<f64>) -> Result<Self> {
        if dim == 0 || increments.len() != dim * grid.n_steps() {
            return Err(Error::input(format!(
                "expected {}x{} increments, got {}",
                dim,
                grid.n_steps(),
                increments.len()
            )));
        }
        Ok(Self { dim, grid, increments })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn increment(&self, site: usize, step: usize) -> f64 {
        self.increments[site * self.grid.n_steps() + step]
    }

    pub fn site_increments(&self, site: usize) -> &[f64] {
        let n = self.grid.n_steps();
        &self.increments[site * n..(site + 1) * n]
    }

    /// The M-vector `Δw_n` of step `step`.
    pub fn increments_at(&self, step: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.increments_into(step, &mut out);
        out
    }

    pub fn increments_into(&self, step: usize, out: &mut [f64]) {
        let n = self.grid.n_steps();
        for (site, v) in out.iter_mut().enumerate() {
            *v = self.increments[site * n + step];
        }
    }

    /// Running Brownian values `w_{t_idx}` for every coordinate.
    pub fn values_at(&self, t_idx: usize) -> Result<Vec<f64>> {
        if t_idx > self.grid.n_steps() {
            return Err(Error::input(format!(
                "time index {t_idx} beyond {} steps",
                self.grid.n_steps()
            )));
        }
        Ok((0..self.dim)
            .map(|site| self.site_increments(site)[..t_idx].iter().sum())
            .collect())
    }

    /// Same Brownian path on a grid `factor` times coarser (increments summed).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let increments = self.increments.chunks(factor).map(|c| c.iter().sum()).collect();
        Ok(Self {
            dim: self.dim,
            grid,
            increments,
        })
    }
}

/// `sin(π x)` with exact zeros at the integers.
fn sin_pi(x: f64) -> f64 {
    let r = x.rem_euclid(2.0);
    if r == 0.0 || r == 1.0 {
        0.0
    } else {
        (PI * r).sin()
    }
}

/// Brownian path on `[0, t]` in sine-series form,
///
/// `w_s = f_0 s/√t + √(2/t) Σ_{k=1..K} f_k sin(ω_k s)/ω_k`,  `ω_k = πk/t`,
///
/// with `f_0 = w_t/√t`. The series is the Karhunen-Loève expansion of the
/// bridge pinned at `w_0 = 0`, `w_t`; its covariance is `s(t - s)/t` as K→∞.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBridge {
    dim: usize,
    horizon: f64,
    endpoint: Vec<f64>,
    // coeffs[(k - 1) * dim + j] = f_{k j}
    coeffs: Vec<f64>,
    n_modes: usize,
}

impl FourierBridge {
    /// Bridge pinned to `endpoint` at time `horizon`.
    pub fn pinned(endpoint: &[f64], horizon: f64, n_modes: usize, seed: u64, member: u64) -> Result<Self> {
        validate_bridge(endpoint.len(), horizon, n_modes)?;
        Ok(Self {
            dim: endpoint.len(),
            horizon,
            endpoint: endpoint.to_vec(),
            coeffs: draw_modes(endpoint.len(), n_modes, seed, member, 1),
            n_modes,
        })
    }

    /// Free-endpoint Brownian path: `f_0` is standard normal and `w_t = f_0 √t`.
    pub fn free(dim: usize, horizon: f64, n_modes: usize, seed: u64, member: u64) -> Result<Self> {
        validate_bridge(dim, horizon, n_modes)?;
        let all = draw_modes(dim, n_modes + 1, seed, member, 0);
        let endpoint = all[..dim].iter().map(|f0| f0 * horizon.sqrt()).collect();
        Ok(Self {
            dim,
            horizon,
            endpoint,
            coeffs: all[dim..].to_vec(),
            n_modes,
        })
    }

    /// Builds a bridge from explicit mode coefficients, laid out `[k-1][j]`.
    pub fn from_coefficients(endpoint: &[f64], horizon: f64, coeffs: Vec<f64>) -> Result<Self> {
        let dim = endpoint.len();
        if dim == 0 || !coeffs.len().is_multiple_of(dim) {
            return Err(Error::input("coefficient array does not match the dimension"));
        }
        let n_modes = coeffs.len() / dim;
        validate_bridge(dim, horizon, n_modes)?;
        Ok(Self {
            dim,
            horizon,
            endpoint: endpoint.to_vec(),
            coeffs,
            n_modes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn endpoint(&self) -> &[f64] {
        &self.endpoint
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn omega(&self, k: usize) -> f64 {
        PI * k as f64 / self.horizon
    }

    pub fn eval(&self, s: f64) -> Result<Vec<f64>> {
        let t = self.horizon;
        if !(0.0..=t).contains(&s) {
            return Err(Error::input(format!("bridge time {s} outside [0, {t}]")));
        }
        let r = s / t;
        let mut out: Vec<f64> = self.endpoint.iter().map(|w| w * r).collect();
        let amp = (2.0 / t).sqrt();
        for k in 1..=self.n_modes {
            let sk = sin_pi(k as f64 * r);
            if sk == 0.0 {
                continue;
            }
            let c = amp * sk / self.omega(k);
            let fk = &self.coeffs[(k - 1) * self.dim..k * self.dim];
            for (o, f) in out.iter_mut().zip(fk) {
                *o += c * f;
            }
        }
        Ok(out)
    }

    /// Values at every node of `basis`, row-major `[n][j]`.
    pub fn eval_on(&self, basis: &BridgeBasis) -> Result<Vec<f64>> {
        if basis.n_modes != self.n_modes || basis.horizon != self.horizon {
            return Err(Error::input("bridge basis does not match the bridge"));
        }
        let nodes = basis.n_steps + 1;
        let mut out = vec![0.0; nodes * self.dim];
        for n in 0..nodes {
            let row = &mut out[n * self.dim..(n + 1) * self.dim];
            let r = basis.fractions[n];
            for (o, w) in row.iter_mut().zip(&self.endpoint) {
                *o = w * r;
            }
            let tab = &basis.table[n * self.n_modes..(n + 1) * self.n_modes];
            for (k, c) in tab.iter().enumerate() {
                if *c == 0.0 {
                    continue;
                }
                let fk = &self.coeffs[k * self.dim..(k + 1) * self.dim];
                for (o, f) in row.iter_mut().zip(fk) {
                    *o += c * f;
                }
            }
        }
        Ok(out)
    }
}

fn validate_bridge(dim: usize, horizon: f64, n_modes: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::input("bridge dimension must be at least 1"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::input(format!("bridge horizon must be positive, got {horizon}")));
    }
    if n_modes == 0 {
        return Err(Error::input("bridge needs at least one mode"));
    }
    Ok(())
}

// Mode k draws from lane k (lane 0 is the free endpoint coefficient).
fn draw_modes(dim: usize, count: usize, seed: u64, member: u64, first_lane: u64) -> Vec<f64> {
    let key = StreamKey::new(seed, Domain::BridgeModes);
    let mut out = vec![0.0; dim * count];
    for (i, row) in out.chunks_mut(dim).enumerate() {
        key.lane(member, first_lane + i as u64).fill(row, 1.0);
    }
    out
}

/// Precomputed `√(2/t) sin(ω_k s_n)/ω_k` on a uniform grid, shared by many bridges.
#[derive(Debug, Clone)]
pub struct BridgeBasis {
    horizon: f64,
    n_steps: usize,
    n_modes: usize,
    fractions: Vec<f64>,
    table: Vec<f64>,
}

impl BridgeBasis {
    pub fn new(horizon: f64, n_steps: usize, n_modes: usize) -> Result<Self> {
        validate_bridge(1, horizon, n_modes)?;
        let grid = TimeGrid::uniform(horizon, n_steps)?;
        let amp = (2.0 / horizon).sqrt();
        let fractions: Vec<f64> = grid.times().iter().map(|s| s / horizon).collect();
        let mut table = Vec::with_capacity((n_steps + 1) * n_modes);
        for r in &fractions {
            for k in 1..=n_modes {
                let omega = PI * k as f64 / horizon;
                table.push(amp * sin_pi(k as f64 * r) / omega);
            }
        }
        Ok(Self {
            horizon,
            n_steps,
            n_modes,
            fractions,
            table,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
}

/// One realization of the periodic Brownian sheet on `[-L, L]`,
///
/// `W(x,t) = (√L/π) Σ_{n≥1} (1/n) (X_t^(n) cos(nπx/L) + Y_t^(n) sin(nπx/L))`,
///
/// truncated at `n_modes`. Mode trajectories are stored on the whole grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SheetSample {
    half_period: f64,
    n_modes: usize,
    grid: TimeGrid,
    // [mode][t_idx], t_idx in 0..=n_steps
    cos_modes: Vec<f64>,
    sin_modes: Vec<f64>,
}

impl SheetSample {
    pub fn sample(half_period: f64, n_modes: usize, grid: TimeGrid, seed: u64, member: u64) -> Result<Self> {
        if !(half_period > 0.0 && half_period.is_finite()) {
            return Err(Error::input(format!("half period must be positive, got {half_period}")));
        }
        if n_modes == 0 {
            return Err(Error::input("sheet needs at least one mode"));
        }
        let n = grid.n_steps();
        let scale = grid.step().sqrt();
        let key = StreamKey::new(seed, Domain::SheetModes);
        let draw = |lane: u64| {
            let mut stream = key.lane(member, lane);
            let mut out = vec![0.0; n + 1];
            let mut acc = 0.0;
            for v in out.iter_mut().skip(1) {
                acc += scale * stream.next_normal();
                *v = acc;
            }
            out
        };
        let mut cos_modes = Vec::with_capacity(n_modes * (n + 1));
        let mut sin_modes = Vec::with_capacity(n_modes * (n + 1));
        for mode in 0..n_modes as u64 {
            cos_modes.extend(draw(2 * mode));
            sin_modes.extend(draw(2 * mode + 1));
        }
        Ok(Self {
            half_period,
            n_modes,
            grid,
            cos_modes,
            sin_modes,
        })
    }

    pub fn half_period(&self) -> f64 {
        self.half_period
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn eval(&self, x: f64, t_idx: usize) -> Result<f64> {
        Ok(self.eval_many(&[x], t_idx)?[0])
    }

    pub fn eval_many(&self, xs: &[f64], t_idx: usize) -> Result<Vec<f64>> {
        let basis = self.basis(xs);
        let mut out = vec![0.0; xs.len()];
        self.eval_on(&basis, t_idx, &mut out)?;
        Ok(out)
    }

    /// Trigonometric weights for a fixed set of positions, reusable across time indices.
    pub fn basis(&self, xs: &[f64]) -> SheetBasis {
        let l = self.half_period;
        let pref = l.sqrt() / PI;
        let mut weights = Vec::with_capacity(2 * xs.len() * self.n_modes);
        for &x in xs {
            // phase in units of π, reduced to one period
            let phase = (x / l).rem_euclid(2.0);
            for m in 0..self.n_modes {
                let k = (m + 1) as f64;
                let arg = PI * (k * phase).rem_euclid(2.0);
                weights.push(pref * arg.cos() / k);
                weights.push(pref * arg.sin() / k);
            }
        }
        SheetBasis {
            n_points: xs.len(),
            n_modes: self.n_modes,
            weights,
        }
    }

    /// Writes `W(x_i, t)` for the positions of `basis` into `out`.
    pub fn eval_on(&self, basis: &SheetBasis, t_idx: usize, out: &mut [f64]) -> Result<()> {
        let n = self.grid.n_steps();
        if t_idx > n {
            return Err(Error::input(format!(
                "time index {t_idx} beyond sampled horizon of {n} steps"
            )));
        }
        if basis.n_modes != self.n_modes || out.len() != basis.n_points {
            return Err(Error::input("sheet basis does not match this sample"));
        }
        for (i, o) in out.iter_mut().enumerate() {
            let w = &basis.weights[2 * i * self.n_modes..2 * (i + 1) * self.n_modes];
            let mut acc = 0.0;
            for m in 0..self.n_modes {
                acc +=
                    w[2 * m] * self.cos_modes[m * (n + 1) + t_idx] + w[2 * m + 1] * self.sin_modes[m * (n + 1) + t_idx];
            }
            *o = acc;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SheetBasis {
    n_points: usize,
    n_modes: usize,
    weights: Vec<f64>,
}

impl SheetBasis {
    pub fn n_points(&self) -> usize {
        self.n_points
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_var(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0.5, 4).is_err());
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(g.step(), 0.25);
        assert_eq!(g.time(4), 1.0);
        assert!(g.times().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(g.index_of(0.5).unwrap(), 2);
        assert!(g.index_of(0.3).is_err());
    }

    #[test]
    fn increments_are_deterministic() {
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let a = BrownianPath::sample(3, g, 11).unwrap();
        let b = BrownianPath::sample(3, g, 11).unwrap();
        let c = BrownianPath::sample(3, g, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(BrownianPath::sample(0, g, 1).is_err());
    }

    #[test]
    fn increment_variance_and_independence() {
        // 3-sigma chi-square band for n = 1e5: 1 ± 3·sqrt(2/n) ≈ 1 ± 0.0134
        let g = TimeGrid::uniform(1.0, 1).unwrap();
        let n = 100_000;
        let draws: Vec<(f64, f64)> = (0..n)
            .map(|m| {
                let p = BrownianPath::sample_member(2, g, 5, m).unwrap();
                (p.increment(0, 0), p.increment(1, 0))
            })
            .collect();
        let a: Vec<f64> = draws.iter().map(|d| d.0).collect();
        let b: Vec<f64> = draws.iter().map(|d| d.1).collect();
        let var = sample_var(&a);
        assert!((0.97..=1.03).contains(&var), "variance {var}");
        let cov = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        let rho = cov / (var.sqrt() * sample_var(&b).sqrt());
        assert!(rho.abs() < 0.01, "correlation {rho}");
    }

    #[test]
    fn coarsened_path_sums_increments() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let p = BrownianPath::sample(2, g, 3).unwrap();
        let c = p.coarsen(4).unwrap();
        assert_eq!(c.grid().n_steps(), 2);
        let fine_end = p.values_at(8).unwrap();
        let coarse_end = c.values_at(2).unwrap();
        for (a, b) in fine_end.iter().zip(&coarse_end) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(p.coarsen(3).is_err());
    }

    #[test]
    fn bridge_boundary_values() {
        let b = FourierBridge::pinned(&[0.7, -1.3], 2.0, 256, 9, 0).unwrap();
        assert_eq!(b.eval(0.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(b.eval(2.0).unwrap(), vec![0.7, -1.3]);
        assert!(b.eval(-0.1).is_err());
        assert!(b.eval(2.1).is_err());
    }

    #[test]
    fn bridge_grid_matches_pointwise() {
        let b = FourierBridge::pinned(&[0.4], 1.5, 64, 2, 7).unwrap();
        let basis = BridgeBasis::new(1.5, 10, 64).unwrap();
        let grid = b.eval_on(&basis).unwrap();
        let times = TimeGrid::uniform(1.5, 10).unwrap().times();
        for (n, s) in times.iter().enumerate() {
            let v = b.eval(*s).unwrap()[0];
            assert!((v - grid[n]).abs() < 1e-13);
        }
    }

    #[test]
    fn bridge_midpoint_variance() {
        // Covariance s(t - s)/t gives t/4 at s = t/2; truncation at K = 200
        // removes about 4/(π² K) ≈ 0.2% of it.
        let vals: Vec<f64> = (0..100_000)
            .map(|m| {
                FourierBridge::pinned(&[0.0], 1.0, 200, 17, m)
                    .unwrap()
                    .eval(0.5)
                    .unwrap()[0]
            })
            .collect();
        let var = sample_var(&vals);
        assert!((var - 0.25).abs() < 0.05 * 0.25, "variance {var}");
    }

    #[test]
    fn free_bridge_endpoint_is_gaussian() {
        let ends: Vec<f64> = (0..20_000)
            .map(|m| FourierBridge::free(1, 2.0, 8, 4, m).unwrap().endpoint()[0])
            .collect();
        let var = sample_var(&ends);
        assert!((var - 2.0).abs() < 0.06, "variance {var}");
    }

    #[test]
    fn sheet_starts_at_zero_and_is_periodic() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let s = SheetSample::sample(1.0, 50, g, 3, 0).unwrap();
        for x in [-0.9, 0.0, 0.3, 2.7] {
            assert_eq!(s.eval(x, 0).unwrap(), 0.0);
            let a = s.eval(x, 7).unwrap();
            let b = s.eval(x + 2.0, 7).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(s.eval(0.0, 11).is_err());
    }

    #[test]
    fn sheet_variance_is_lt_over_six() {
        let g = TimeGrid::uniform(1.0, 1).unwrap();
        let vals: Vec<f64> = (0..10_000)
            .map(|m| SheetSample::sample(1.0, 500, g, 21, m).unwrap().eval(0.37, 1).unwrap())
            .collect();
        let var = sample_var(&vals);
        assert!((var - 1.0 / 6.0).abs() < 0.03 / 6.0, "variance {var}");
    }
}

//! Lattice SDEs of the DNLS hierarchy on a periodic chain,
//!
//! `dx_j = −ν_k (Δ^{(k−1)} x)_j dt + x_j dw_j`,  k = 2 (transport), k = 3 (heat),
//!
//! solved either by direct Euler-Maruyama or through integrator factors.
//!
//! With `F_j(t) = exp(−w_j(t) + t/2)` we have `dF_j = F_j(−dw_j + dt)` and
//! `dF_j dx_j = −F_j x_j dt`, so Itô's product rule gives
//!
//! `d(F_j x_j) = F_j b_j(x) dt`.
//!
//! The noise and the quadratic-variation term cancel and `y_j = F_j x_j`
//! solves the random linear ODE `ẏ = A(t) y`. Writing `x_i = y_i / F_i` and
//! `F_j / F_i = exp(w_i − w_j)`:
//!
//! * k = 2, `b_j = −(x_{j+1} − x_j)`: `A = Σ_j e_jj − B_j e_{j,j+1}`, `B_j = exp(w_{j+1} − w_j)`.
//! * k = 3, `b_j = −ν(x_{j+2} − 2x_{j+1} + x_j)`: `A_jj = −ν`,
//!   `A_{j,j+1} = 2ν B_j`, `A_{j,j+2} = −ν C_j` with `C_j = exp(w_{j+2} − w_j)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::paths::{BrownianPath, TimeGrid};
use crate::sde::{guard, simulate, step_in_place, NoiseMode, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeState {
    values: Vec<f64>,
}

impl LatticeState {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::input("a lattice needs at least two sites"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("lattice values must be finite"));
        }
        Ok(Self { values })
    }

    pub fn constant(sites: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; sites])
    }

    pub fn sites(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HierarchyLevel {
    k: u8,
    rescale_time: bool,
}

impl HierarchyLevel {
    /// Level `k` with ν absorbed into time.
    pub fn new(k: u8) -> Result<Self> {
        if !(k == 2 || k == 3) {
            return Err(Error::input(format!("k must be 2 or 3, got {k}")));
        }
        Ok(Self { k, rescale_time: true })
    }

    pub fn with_rescale_time(mut self, rescale: bool) -> Self {
        self.rescale_time = rescale;
        self
    }

    pub fn k(&self) -> u8 {
        self.k
    }

    pub fn rescale_time(&self) -> bool {
        self.rescale_time
    }

    /// Coefficient actually applied: 1 when absorbed, else ν₂ = 1, ν₃ = 1/3.
    pub fn nu(&self) -> f64 {
        match (self.rescale_time, self.k) {
            (true, _) | (false, 2) => 1.0,
            _ => 1.0 / 3.0,
        }
    }

    fn check_sites(&self, m: usize) -> Result<()> {
        if m < self.k as usize {
            return Err(Error::input(format!(
                "level {} needs at least {} sites, got {m}",
                self.k, self.k
            )));
        }
        Ok(())
    }
}

pub(crate) fn delta_into(order: u8, x: &[f64], out: &mut [f64]) {
    let m = x.len();
    for j in 0..m {
        let a = x[(j + 1) % m];
        out[j] = match order {
            1 => a - x[j],
            _ => x[(j + 2) % m] - 2.0 * a + x[j],
        };
    }
}

/// Periodic forward differences of order 1 or 2.
pub fn delta(order: u8, state: &LatticeState) -> Result<LatticeState> {
    if !(order == 1 || order == 2) {
        return Err(Error::input(format!("difference order must be 1 or 2, got {order}")));
    }
    let mut out = vec![0.0; state.sites()];
    delta_into(order, state.values(), &mut out);
    Ok(LatticeState { values: out })
}

/// `−ν_k Δ^{(k−1)} x`.
pub fn hierarchy_drift(level: HierarchyLevel, x: &[f64], out: &mut [f64]) {
    delta_into(level.k - 1, x, out);
    let nu = level.nu();
    out.iter_mut().for_each(|v| *v *= -nu);
}

/// One Euler-Maruyama step `x_j − ν_k δ (Δ^{(k−1)}x)_j + x_j Δw_j`.
pub fn hierarchy_step(level: HierarchyLevel, state: &LatticeState, dt: f64, dw: &[f64]) -> Result<LatticeState> {
    level.check_sites(state.sites())?;
    if !(dt > 0.0) {
        return Err(Error::input(format!("time step must be positive, got {dt}")));
    }
    if dw.len() != state.sites() {
        return Err(Error::input("noise increment and lattice sizes differ"));
    }
    let mut x = state.values.clone();
    let mut buf = vec![0.0; x.len()];
    let drift = |s: &[f64], o: &mut [f64]| hierarchy_drift(level, s, o);
    step_in_place(&mut x, &drift, &mut buf, dt, dw, NoiseMode::Multiplicative)?;
    guard(&x, 1)?;
    Ok(LatticeState { values: x })
}

/// `F_j(t) = exp(−w_j(t) + t/2)` at grid node `t_idx`.
pub fn integrator_factor(path: &BrownianPath, site: usize, t_idx: usize) -> Result<f64> {
    if site >= path.dim() {
        return Err(Error::input(format!("site {site} outside a lattice of {}", path.dim())));
    }
    let w = path.values_at(t_idx)?;
    let t = path.grid().time(t_idx) - path.grid().t_start();
    Ok((-w[site] + 0.5 * t).exp())
}

/// Coefficient matrix of `ẏ = A(t) y` given the running Brownian values.
#[allow(non_snake_case)]
pub fn build_A(level: HierarchyLevel, w: &[f64]) -> Result<DMatrix<f64>> {
    let m = w.len();
    level.check_sites(m)?;
    let nu = level.nu();
    let mut a = DMatrix::<f64>::zeros(m, m);
    for j in 0..m {
        let j1 = (j + 1) % m;
        let b = (w[j1] - w[j]).exp();
        match level.k {
            2 => {
                a[(j, j)] += nu;
                a[(j, j1)] -= nu * b;
            }
            _ => {
                let j2 = (j + 2) % m;
                a[(j, j)] -= nu;
                a[(j, j1)] += 2.0 * nu * b;
                a[(j, j2)] -= nu * (w[j2] - w[j]).exp();
            }
        }
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("integrator-factor matrix", w));
    }
    Ok(a)
}

/// Integrator factors and coefficient matrix at one grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorFactorSystem {
    pub factors: Vec<f64>,
    pub a: DMatrix<f64>,
}

impl IntegratorFactorSystem {
    pub fn at(level: HierarchyLevel, path: &BrownianPath, t_idx: usize) -> Result<Self> {
        let w = path.values_at(t_idx)?;
        let t = path.grid().time(t_idx) - path.grid().t_start();
        Ok(Self {
            factors: w.iter().map(|wj| (-wj + 0.5 * t).exp()).collect(),
            a: build_A(level, &w)?,
        })
    }
}

/// Product of per-step exponentials `exp(A(t_n) δ)` applied to `y0 = x0`;
/// returns the x-trajectory `x_j = y_j / F_j`.
pub fn path_ordered_solve(level: HierarchyLevel, x0: &[f64], path: &BrownianPath) -> Result<Trajectory> {
    let m = x0.len();
    level.check_sites(m)?;
    if m != path.dim() {
        return Err(Error::input("initial state and path have different numbers of sites"));
    }
    let grid = *path.grid();
    let dt = grid.step();
    let mut w = vec![0.0; m];
    let mut dw = vec![0.0; m];
    let mut y = DVector::from_column_slice(x0);
    let mut states = Vec::with_capacity(m * (grid.n_steps() + 1));
    states.extend_from_slice(x0);
    for n in 0..grid.n_steps() {
        let step = (build_A(level, &w)? * dt).exp();
        y = step * y;
        path.increments_into(n, &mut dw);
        w.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        let t = grid.time(n + 1) - grid.t_start();
        let x: Vec<f64> = y.iter().zip(&w).map(|(yj, wj)| yj * (wj - 0.5 * t).exp()).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: n + 1,
                threshold: crate::sde::DIVERGENCE_THRESHOLD,
            });
        }
        guard(&x, n + 1)?;
        states.extend_from_slice(&x);
    }
    Trajectory::from_states(grid, m, states)
}

/// Direct Euler-Maruyama simulation of the hierarchy SDE.
pub fn direct_solve(level: HierarchyLevel, x0: &[f64], path: &BrownianPath) -> Result<Trajectory> {
    level.check_sites(x0.len())?;
    let drift = |s: &[f64], o: &mut [f64]| hierarchy_drift(level, s, o);
    simulate(x0, &drift, NoiseMode::Multiplicative, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Direct,
    Integrator,
}

pub fn solve(route: Route, level: HierarchyLevel, x0: &[f64], path: &BrownianPath) -> Result<Trajectory> {
    match route {
        Route::Direct => direct_solve(level, x0, path),
        Route::Integrator => path_ordered_solve(level, x0, path),
    }
}

/// Trajectories for members `0..n_paths`, each on its own Brownian path.
///
/// `zero_noise` replaces every path by w ≡ 0 and is only accepted on the
/// direct route: the integrator factor carries the Itô term `t/2`, so a
/// frozen path there solves a different equation.
pub fn ensemble(
    route: Route,
    level: HierarchyLevel,
    x0: &[f64],
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    zero_noise: bool,
) -> Result<Vec<Trajectory>> {
    if zero_noise && route == Route::Integrator {
        return Err(Error::input("zero noise is only defined on the direct route"));
    }
    (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let path = if zero_noise {
                BrownianPath::zero(x0.len(), grid)
            } else {
                BrownianPath::sample_member(x0.len(), grid, seed, i)?
            };
            solve(route, level, x0, &path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::summarize;
    use approx::assert_abs_diff_eq;

    fn st(v: &[f64]) -> LatticeState {
        LatticeState::new(v.to_vec()).unwrap()
    }

    #[test]
    fn delta_examples() {
        assert!(delta(1, &st(&[3.0; 5])).unwrap().values().iter().all(|v| *v == 0.0));
        assert_eq!(delta(1, &st(&[1.0, 2.0, 4.0])).unwrap().values(), &[1.0, 2.0, -3.0]);
        assert_eq!(delta(2, &st(&[1.0, 2.0, 4.0])).unwrap().values(), &[1.0, -5.0, 4.0]);
        assert!(delta(3, &st(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn step_examples() {
        let k2 = HierarchyLevel::new(2).unwrap();
        let k3 = HierarchyLevel::new(3).unwrap();
        let x = st(&[1.0, 2.0, 4.0]);
        let a = hierarchy_step(k2, &x, 0.1, &[0.0; 3]).unwrap();
        for (v, e) in a.values().iter().zip([0.9, 1.8, 4.3]) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-14);
        }
        let b = hierarchy_step(k3, &x, 0.1, &[0.0; 3]).unwrap();
        for (v, e) in b.values().iter().zip([0.9, 2.5, 3.6]) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-14);
        }
        let c = st(&[1.5; 4]);
        assert_eq!(hierarchy_step(k3, &c, 0.1, &[0.0; 4]).unwrap(), c);
        let slow = hierarchy_step(k3.with_rescale_time(false), &x, 0.1, &[0.0; 3]).unwrap();
        assert_abs_diff_eq!(slow.values()[1], 2.0 + 0.5 / 3.0, epsilon = 1e-14);
        assert!(HierarchyLevel::new(4).is_err());
        assert!(hierarchy_step(k3, &st(&[1.0, 2.0]), 0.1, &[0.0; 2]).is_err());
    }

    #[test]
    fn integrator_factor_examples() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let zero = BrownianPath::zero(2, grid);
        assert_eq!(integrator_factor(&zero, 0, 0).unwrap(), 1.0);
        assert_abs_diff_eq!(integrator_factor(&zero, 1, 4).unwrap(), 1.64872, epsilon = 1e-5);
        let p = BrownianPath::from_increments(1, grid, vec![0.125; 4]).unwrap();
        assert_abs_diff_eq!(integrator_factor(&p, 0, 4).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn build_a_examples() {
        let k2 = HierarchyLevel::new(2).unwrap();
        let a = build_A(k2, &[0.0; 4]).unwrap();
        let mut expected = DMatrix::<f64>::identity(4, 4);
        for j in 0..4 {
            expected[(j, (j + 1) % 4)] = -1.0;
        }
        assert_eq!(a, expected);
        for r in a.row_iter() {
            assert_eq!(r.sum(), 0.0);
        }
        let a = build_A(k2, &[0.1, 0.3, -0.2]).unwrap();
        assert_abs_diff_eq!(a[(0, 1)], -1.2214, epsilon = 1e-4);
        assert_abs_diff_eq!(a[(1, 2)], -0.6065, epsilon = 1e-4);
        assert_abs_diff_eq!(a[(2, 0)], -1.3499, epsilon = 1e-4);
        assert_eq!(a[(1, 1)], 1.0);
        assert_eq!(a[(1, 0)], 0.0);
        let a3 = build_A(HierarchyLevel::new(3).unwrap(), &[0.0; 5]).unwrap();
        for r in a3.row_iter() {
            assert_eq!(r.sum(), 0.0);
        }
        assert_eq!(a3[(4, 0)], 2.0);
        assert_eq!(a3[(4, 1)], -1.0);
    }

    #[test]
    fn k3_matrix_reproduces_drift_through_factors() {
        // F_j b_j(x) = (A y)_j with y = F x, at arbitrary w and t
        let level = HierarchyLevel::new(3).unwrap().with_rescale_time(false);
        let w: [f64; 5] = [0.3, -0.1, 0.7, 0.2, -0.5];
        let x = [1.0, 0.4, 2.0, 1.3, 0.8];
        let t = 0.37;
        let f: Vec<f64> = w.iter().map(|wj| (-wj + 0.5 * t).exp()).collect();
        let y = DVector::from_iterator(5, x.iter().zip(&f).map(|(a, b)| a * b));
        let ay = build_A(level, &w).unwrap() * y;
        let mut b = [0.0; 5];
        hierarchy_drift(level, &x, &mut b);
        for j in 0..5 {
            assert_abs_diff_eq!(ay[j], f[j] * b[j], epsilon = 1e-13);
        }
    }

    #[test]
    fn two_site_null_vector() {
        let level = HierarchyLevel::new(2).unwrap();
        let a = build_A(level, &[0.0, 0.0]).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let traj = path_ordered_solve(level, &[1.0, 1.0], &BrownianPath::zero(2, grid)).unwrap();
        assert_eq!(traj.state(0), &[1.0, 1.0]);
        for (n, s) in traj.states().enumerate() {
            let e = (-0.5 * grid.time(n)).exp();
            assert_abs_diff_eq!(s[0], e, epsilon = 1e-12);
            assert_abs_diff_eq!(s[1], e, epsilon = 1e-12);
        }
    }

    #[test]
    fn routes_converge_to_each_other() {
        let level = HierarchyLevel::new(2).unwrap();
        let x0: Vec<f64> = (0..8).map(|j| 1.0 + 0.3 * (j as f64).sin()).collect();
        let fine = TimeGrid::uniform(0.5, 1024).unwrap();
        let mut errs = Vec::new();
        for factor in [16, 8, 4, 2] {
            let mut sq = 0.0;
            for member in 0..64 {
                let path = BrownianPath::sample_member(8, fine, 21, member)
                    .unwrap()
                    .coarsen(factor)
                    .unwrap();
                let a = direct_solve(level, &x0, &path).unwrap();
                let b = path_ordered_solve(level, &x0, &path).unwrap();
                sq += a
                    .terminal()
                    .iter()
                    .zip(b.terminal())
                    .map(|(p, q)| (p - q).powi(2))
                    .sum::<f64>()
                    / 8.0;
            }
            errs.push((sq / 64.0).sqrt());
        }
        for w in errs.windows(2) {
            assert!(w[0] / w[1] >= 1.3, "{errs:?}");
        }
    }

    #[test]
    fn zero_noise_conserves_sum() {
        for k in [2, 3] {
            let level = HierarchyLevel::new(k).unwrap();
            let x0: Vec<f64> = (0..16).map(|j| 1.0 + 0.1 * ((j * 7 % 5) as f64)).collect();
            let grid = TimeGrid::uniform(0.25, 256).unwrap();
            let traj = direct_solve(level, &x0, &BrownianPath::zero(16, grid)).unwrap();
            let s0: f64 = x0.iter().sum();
            let s1: f64 = traj.terminal().iter().sum();
            assert!((s0 - s1).abs() < 1e-12 * s0, "k={k}: {s0} {s1}");
        }
        let grid = TimeGrid::uniform(0.25, 16).unwrap();
        let level = HierarchyLevel::new(2).unwrap();
        assert!(ensemble(Route::Integrator, level, &[1.0; 4], grid, 2, 0, true).is_err());
    }

    #[test]
    fn mean_of_sum_is_a_martingale() {
        let level = HierarchyLevel::new(3).unwrap();
        let x0: Vec<f64> = (0..8).map(|j| 1.0 + 0.2 * (j as f64).cos()).collect();
        let grid = TimeGrid::uniform(0.25, 250).unwrap();
        let trajs = ensemble(Route::Direct, level, &x0, grid, 10_000, 5, false).unwrap();
        let sums: Vec<f64> = trajs.iter().map(|t| t.terminal().iter().sum()).collect();
        let s = summarize(&sums).unwrap();
        let s0: f64 = x0.iter().sum();
        assert!((s.mean - s0).abs() < 3.0 * s.std_error, "{s:?} vs {s0}");
    }

    #[test]
    fn second_order_dyson_series_agrees_with_product() {
        // two pieces of constant A: exp(A1 δ) exp(A0 δ) = I + δ(A0 + A1)
        // + δ²(A0²/2 + A1 A0 + A1²/2) + O(δ³)
        let level = HierarchyLevel::new(3).unwrap();
        let a0 = build_A(level, &[0.0, 0.2, -0.1]).unwrap();
        let a1 = build_A(level, &[0.1, 0.1, 0.3]).unwrap();
        let mut prev = f64::NAN;
        for d in [1e-2, 5e-3] {
            let product = (&a1 * d).exp() * (&a0 * d).exp();
            let series =
                DMatrix::identity(3, 3) + (&a0 + &a1) * d + (&a0 * &a0 * 0.5 + &a1 * &a0 + &a1 * &a1 * 0.5) * (d * d);
            let err = (product - series).amax();
            assert!(err < 100.0 * d * d * d, "{err}");
            if prev.is_finite() {
                assert!(prev / err > 6.0);
            }
            prev = err;
        }
    }
}

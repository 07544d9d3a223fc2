//! Grid-refinement experiments for the stochastic transport (k = 2) and
//! heat (k = 3) equations `∂_t φ = −∂_x^{k−1} φ + φ Ẇ` on `[−L, L)`.
//!
//! Level ℓ has `M = M₀ 2^ℓ` sites `x_j = −L + 2Lj/M`, spacing `h = 2L/M`, and
//! `N = N₀ 2^ℓ` steps, so δ ∝ 1/M. The lattice update is
//! `φ_j ← φ_j − δ (Δ^{(k−1)} φ)_j / h^{k−1} + φ_j ΔW(x_j)` with the one-sided
//! differences of the hierarchy. Every level of one member reads the same
//! Brownian sheet, sampled on the finest time grid; coarse sites are a subset
//! of fine sites, so the noise restricts exactly.
//!
//! Both continuum equations are ill-posed forward in time (the one-sided
//! first difference is anti-diffusive, `−∂²` is backward heat), so only short
//! horizons and smooth data give meaningful numbers.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::colehopf::Equation;
use crate::dnls::delta_into;
use crate::error::{Error, Result};
use crate::paths::{SheetSample, TimeGrid};
use crate::sde::guard;
use crate::stats::summarize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefinementLadder {
    pub half_period: f64,
    pub horizon: f64,
    pub base_sites: usize,
    pub base_steps: usize,
    pub n_levels: usize,
    pub sheet_modes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelSpec {
    pub sites: usize,
    pub n_steps: usize,
    pub spacing: f64,
    pub dt: f64,
}

impl RefinementLadder {
    pub fn new(base_sites: usize, base_steps: usize, n_levels: usize, horizon: f64) -> Result<Self> {
        let ladder = Self {
            half_period: 1.0,
            horizon,
            base_sites,
            base_steps,
            n_levels,
            sheet_modes: 64,
        };
        ladder.validate()?;
        Ok(ladder)
    }

    pub fn with_half_period(mut self, l: f64) -> Result<Self> {
        self.half_period = l;
        self.validate()?;
        Ok(self)
    }

    pub fn with_sheet_modes(mut self, n: usize) -> Result<Self> {
        self.sheet_modes = n;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.base_sites < 3 || self.base_steps == 0 || self.n_levels == 0 || self.sheet_modes == 0 {
            return Err(Error::input(
                "ladder needs ≥ 3 base sites, ≥ 1 step, ≥ 1 level and ≥ 1 sheet mode",
            ));
        }
        if self.n_levels > 20 {
            return Err(Error::input("at most 20 refinement levels"));
        }
        if !(self.horizon > 0.0 && self.half_period > 0.0) {
            return Err(Error::input("horizon and half period must be positive"));
        }
        Ok(())
    }

    pub fn level(&self, l: usize) -> LevelSpec {
        let sites = self.base_sites << l;
        let n_steps = self.base_steps << l;
        LevelSpec {
            sites,
            n_steps,
            spacing: 2.0 * self.half_period / sites as f64,
            dt: self.horizon / n_steps as f64,
        }
    }

    pub fn levels(&self) -> Vec<LevelSpec> {
        (0..self.n_levels).map(|l| self.level(l)).collect()
    }

    pub fn fine_grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.horizon, self.level(self.n_levels - 1).n_steps)
    }

    /// Site positions of level `l`.
    pub fn positions(&self, l: usize) -> Vec<f64> {
        let m = self.level(l).sites;
        (0..m)
            .map(|j| self.half_period * (2.0 * (j as f64 / m as f64) - 1.0))
            .collect()
    }
}

/// Terminal lattice field handed to observables.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeField {
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
    pub spacing: f64,
}

impl LatticeField {
    /// `δ Σ_j φ_j`, the lattice version of `∫φ dx`.
    pub fn mass(&self) -> f64 {
        self.spacing * self.values.iter().sum::<f64>()
    }
}

/// Advances one member on level `l`, reading the shared sheet.
pub fn run_level(
    k: u8,
    ladder: &RefinementLadder,
    l: usize,
    initial: &(dyn Fn(f64) -> f64 + Sync),
    sheet: Option<&SheetSample>,
) -> Result<LatticeField> {
    if !(k == 2 || k == 3) {
        return Err(Error::input(format!("k must be 2 or 3, got {k}")));
    }
    let spec = ladder.level(l);
    let xs = ladder.positions(l);
    let m = spec.sites;
    let stride = 1usize << (ladder.n_levels - 1 - l);
    let scale = spec.dt / spec.spacing.powi(k as i32 - 1);
    let mut phi: Vec<f64> = xs.iter().map(|&x| initial(x)).collect();
    let mut d = vec![0.0; m];
    let basis = sheet.map(|s| s.basis(&xs));
    let (mut w_prev, mut w_next) = (vec![0.0; m], vec![0.0; m]);
    for n in 0..spec.n_steps {
        delta_into(k - 1, &phi, &mut d);
        if let (Some(s), Some(b)) = (sheet, &basis) {
            s.eval_on(b, (n + 1) * stride, &mut w_next)?;
        }
        for j in 0..m {
            phi[j] = phi[j] - scale * d[j] + phi[j] * (w_next[j] - w_prev[j]);
        }
        std::mem::swap(&mut w_prev, &mut w_next);
        guard(&phi, n + 1)?;
    }
    Ok(LatticeField {
        xs,
        values: phi,
        spacing: spec.spacing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelEstimate {
    pub sites: usize,
    pub n_steps: usize,
    pub spacing: f64,
    pub dt: f64,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelDifference {
    /// Mean of `obs(level ℓ+1) − obs(level ℓ)` over members.
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub k: u8,
    pub n_paths: usize,
    pub levels: Vec<LevelEstimate>,
    pub differences: Vec<LevelDifference>,
}

/// Monte Carlo estimate of `E[obs(φ(·, t))]` on every level. With
/// `zero_noise` the sheet is skipped and every member is the deterministic
/// lattice solution.
pub fn refine_experiment(
    k: u8,
    ladder: &RefinementLadder,
    initial: &(dyn Fn(f64) -> f64 + Sync),
    observable: &(dyn Fn(&LatticeField) -> f64 + Sync),
    n_paths: usize,
    seed: u64,
    zero_noise: bool,
) -> Result<ConvergenceReport> {
    if n_paths < 2 {
        return Err(Error::input("need at least two paths"));
    }
    let grid = ladder.fine_grid()?;
    let per_member: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let sheet = if zero_noise {
                None
            } else {
                Some(SheetSample::sample(
                    ladder.half_period,
                    ladder.sheet_modes,
                    grid,
                    seed,
                    i,
                )?)
            };
            (0..ladder.n_levels)
                .map(|l| Ok(observable(&run_level(k, ladder, l, initial, sheet.as_ref())?)))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut levels = Vec::with_capacity(ladder.n_levels);
    for (l, spec) in ladder.levels().into_iter().enumerate() {
        let s = summarize(&per_member.iter().map(|v| v[l]).collect::<Vec<_>>())?;
        levels.push(LevelEstimate {
            sites: spec.sites,
            n_steps: spec.n_steps,
            spacing: spec.spacing,
            dt: spec.dt,
            estimate: s.mean,
            std_error: s.std_error,
        });
    }
    let differences = (1..ladder.n_levels)
        .map(|l| {
            let d: Vec<f64> = per_member.iter().map(|v| v[l] - v[l - 1]).collect();
            let s = summarize(&d)?;
            Ok(LevelDifference {
                value: s.mean,
                std_error: s.std_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceReport {
        k,
        n_paths,
        levels,
        differences,
    })
}

/// Lattice derivative `Δ^{(order)} f / h^{order}` with the one-sided stencils.
pub fn lattice_derivative(order: u8, values: &[f64], spacing: f64) -> Result<Vec<f64>> {
    if !(order == 1 || order == 2) {
        return Err(Error::input(format!("difference order must be 1 or 2, got {order}")));
    }
    let mut out = vec![0.0; values.len()];
    delta_into(order, values, &mut out);
    let s = spacing.powi(order as i32);
    Ok(out.into_iter().map(|v| v / s).collect())
}

/// Centered periodic stencils: `hj` gives `−∂²h − (∂h)²`, `burgers` gives
/// `−∂²u − 2u∂u`. The noise term is left to the caller.
pub fn continuum_burgers_drift(field: &[f64], spacing: f64, equation: Equation) -> Vec<f64> {
    let m = field.len();
    let h2 = spacing * spacing;
    (0..m)
        .map(|j| {
            let (l, c, r) = (field[(j + m - 1) % m], field[j], field[(j + 1) % m]);
            let d1 = (r - l) / (2.0 * spacing);
            let d2 = (r - 2.0 * c + l) / h2;
            match equation {
                Equation::Hj => -d2 - d1 * d1,
                Equation::Burgers => -d2 - 2.0 * c * d1,
            }
        })
        .collect()
}

/// Smooth default profile `1 + a sin(πx/L)`.
pub fn sine_profile(amplitude: f64, half_period: f64) -> impl Fn(f64) -> f64 + Sync {
    move |x| 1.0 + amplitude * (PI * x / half_period).sin()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn ladder_shapes() {
        let l = RefinementLadder::new(8, 16, 3, 0.1).unwrap();
        let specs = l.levels();
        assert_eq!(specs.iter().map(|s| s.sites).collect::<Vec<_>>(), vec![8, 16, 32]);
        assert_eq!(specs.iter().map(|s| s.n_steps).collect::<Vec<_>>(), vec![16, 32, 64]);
        assert_eq!(l.positions(0)[0], -1.0);
        // coarse sites coincide bitwise with every other fine site
        let (c, f) = (l.positions(1), l.positions(2));
        assert!(c.iter().enumerate().all(|(j, x)| *x == f[2 * j]));
        assert!(RefinementLadder::new(2, 16, 3, 0.1).is_err());
    }

    #[test]
    fn sheet_restriction_is_exact() {
        let l = RefinementLadder::new(8, 4, 3, 0.1).unwrap();
        let sheet = SheetSample::sample(1.0, 16, l.fine_grid().unwrap(), 4, 0).unwrap();
        let (c, f) = (l.positions(0), l.positions(2));
        let wc = sheet.eval_many(&c, 7).unwrap();
        let wf = sheet.eval_many(&f, 7).unwrap();
        assert!(wc.iter().enumerate().all(|(j, w)| *w == wf[4 * j]));
    }

    #[test]
    fn zero_noise_transport_conserves_mass() {
        let l = RefinementLadder::new(8, 16, 3, 0.1).unwrap();
        let init = sine_profile(0.5, 1.0);
        for k in [2, 3] {
            for lev in 0..3 {
                let f = run_level(k, &l, lev, &init, None).unwrap();
                assert!((f.mass() - 2.0).abs() < 1e-13, "k={k} level {lev}: {}", f.mass());
            }
        }
    }

    #[test]
    fn mass_is_constant_across_levels_in_mean() {
        let l = RefinementLadder::new(8, 16, 3, 0.1)
            .unwrap()
            .with_sheet_modes(32)
            .unwrap();
        let init = sine_profile(0.5, 1.0);
        let r = refine_experiment(2, &l, &init, &|f| f.mass(), 2000, 11, false).unwrap();
        for e in &r.levels {
            assert!((e.estimate - 2.0).abs() < 3.0 * e.std_error, "{r:?}");
        }
    }

    #[test]
    fn weak_error_differences_shrink() {
        let l = RefinementLadder::new(8, 16, 3, 0.1)
            .unwrap()
            .with_sheet_modes(32)
            .unwrap();
        let init = sine_profile(0.5, 1.0);
        // projection on the initial mode: the downwind stencil's O(h)
        // amplitude growth shows up here, its O(h²) phase lag barely does
        let obs =
            |f: &LatticeField| f.spacing * f.xs.iter().zip(&f.values).map(|(x, v)| v * (PI * x).sin()).sum::<f64>();
        let r = refine_experiment(2, &l, &init, &obs, 500, 2, false).unwrap();
        let d: Vec<f64> = r.differences.iter().map(|d| d.value.abs()).collect();
        assert!(d.windows(2).all(|w| w[1] < w[0]), "{r:?}");
    }

    #[test]
    fn dictionary_stencils_are_first_order() {
        let errs = |order: u8| -> Vec<f64> {
            [32usize, 64, 128]
                .iter()
                .map(|&m| {
                    let h = 2.0 / m as f64;
                    let xs: Vec<f64> = (0..m).map(|j| -1.0 + h * j as f64).collect();
                    let f: Vec<f64> = xs.iter().map(|x| (PI * x).sin()).collect();
                    let exact: Vec<f64> = xs
                        .iter()
                        .map(|x| {
                            if order == 1 {
                                PI * (PI * x).cos()
                            } else {
                                -PI * PI * (PI * x).sin()
                            }
                        })
                        .collect();
                    max_err(&lattice_derivative(order, &f, h).unwrap(), &exact)
                })
                .collect()
        };
        for order in [1, 2] {
            let e = errs(order);
            for w in e.windows(2) {
                let r = w[0] / w[1];
                assert!((1.8..2.2).contains(&r), "order {order}: {e:?}");
            }
        }
    }

    #[test]
    fn continuum_drift_examples() {
        assert!(continuum_burgers_drift(&[0.7; 16], 0.1, Equation::Hj)
            .iter()
            .all(|v| *v == 0.0));
        assert!(continuum_burgers_drift(&[0.7; 16], 0.1, Equation::Burgers)
            .iter()
            .all(|v| *v == 0.0));
        let l = 1.0;
        let errs: Vec<f64> = [64usize, 128, 256]
            .iter()
            .map(|&m| {
                let h = 2.0 * l / m as f64;
                let xs: Vec<f64> = (0..m).map(|j| -l + h * j as f64).collect();
                let f: Vec<f64> = xs.iter().map(|x| (PI * x / l).sin()).collect();
                let k = PI / l;
                let exact: Vec<f64> = xs
                    .iter()
                    .map(|x| k * k * (k * x).sin() - (k * (k * x).cos()).powi(2))
                    .collect();
                max_err(&continuum_burgers_drift(&f, h, Equation::Hj), &exact)
            })
            .collect();
        for w in errs.windows(2) {
            assert!((3.6..4.4).contains(&(w[0] / w[1])), "{errs:?}");
        }
    }

    #[test]
    fn burgers_drift_is_derivative_of_hj_drift() {
        let errs: Vec<f64> = [64usize, 128, 256]
            .iter()
            .map(|&m| {
                let h = 2.0 / m as f64;
                let xs: Vec<f64> = (0..m).map(|j| -1.0 + h * j as f64).collect();
                let hf: Vec<f64> = xs
                    .iter()
                    .map(|x| 0.4 * (PI * x).sin() + 0.1 * (2.0 * PI * x).cos())
                    .collect();
                let u: Vec<f64> = xs
                    .iter()
                    .map(|x| 0.4 * PI * (PI * x).cos() - 0.2 * PI * (2.0 * PI * x).sin())
                    .collect();
                let g = continuum_burgers_drift(&hf, h, Equation::Hj);
                let dg: Vec<f64> = (0..m)
                    .map(|j| (g[(j + 1) % m] - g[(j + m - 1) % m]) / (2.0 * h))
                    .collect();
                max_err(&continuum_burgers_drift(&u, h, Equation::Burgers), &dg)
            })
            .collect();
        for w in errs.windows(2) {
            assert!((3.5..4.5).contains(&(w[0] / w[1])), "{errs:?}");
        }
    }
}

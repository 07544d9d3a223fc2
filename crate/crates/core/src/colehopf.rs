//! Lattice Cole-Hopf chain for the k = 3 heat SDE (ν absorbed):
//! `x_j = e^{y_j}` turns it into a stochastic Hamilton-Jacobi equation for
//! `y`, and `u_j = Δy_j` into a discrete stochastic Burgers equation.
//!
//! With `a = Δy_j`, `b = Δy_{j+1}`, Itô's formula on `y = ln x` gives
//!
//! `dy_j = −(e^{a+b} − 2e^{a} + 1 + ½) dt + dw_j`,
//!
//! which is `DriftMode::ItoDerived`. `DriftMode::PaperLiteral` keeps the
//! displayed form `−(e^{a}(e^{b} − 1) − (e^{a} + 1))`; the two differ by the
//! constant 5/2 at every site. Burgers drifts are `Δ` of the HJ drifts, so
//! the constant cancels and both modes give the same Burgers drift.

use rayon::prelude::*;
use serde::Serialize;

use crate::dnls::{delta_into, hierarchy_drift, HierarchyLevel, LatticeState};
use crate::error::{Error, Result};
use crate::paths::{BrownianPath, TimeGrid};
use crate::sde::{guard, step_in_place, NoiseMode};
use crate::stats::summarize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    PaperLiteral,
    #[default]
    ItoDerived,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Equation {
    Hj,
    Burgers,
}

/// Constant separating the two HJ drift modes.
pub const MODE_OFFSET: f64 = 2.5;

fn check_finite(name: &str, input: &[f64], out: &[f64]) -> Result<()> {
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(name, input));
    }
    Ok(())
}

pub(crate) fn hj_drift_into(y: &[f64], mode: DriftMode, out: &mut [f64]) {
    let m = y.len();
    for j in 0..m {
        let a = y[(j + 1) % m] - y[j];
        let b = y[(j + 2) % m] - y[(j + 1) % m];
        out[j] = match mode {
            DriftMode::PaperLiteral => -(a.exp() * (b.exp() - 1.0) - (a.exp() + 1.0)),
            DriftMode::ItoDerived => -((a + b).exp() - 2.0 * a.exp() + 1.5),
        };
    }
}

pub(crate) fn burgers_drift_into(u: &[f64], mode: DriftMode, out: &mut [f64]) {
    let m = u.len();
    match mode {
        DriftMode::PaperLiteral => {
            for j in 0..m {
                let (e0, e1, e2) = (u[j].exp(), u[(j + 1) % m].exp(), u[(j + 2) % m].exp());
                out[j] = -(e1 * (e2 - e0) - 2.0 * (e1 - e0));
            }
        }
        DriftMode::ItoDerived => {
            // HJ drift written in u = Δy, then differenced
            let h: Vec<f64> = (0..m)
                .map(|j| {
                    let (a, b) = (u[j], u[(j + 1) % m]);
                    -((a + b).exp() - 2.0 * a.exp() + 1.5)
                })
                .collect();
            delta_into(1, &h, out);
        }
    }
}

pub fn hj_drift(y: &LatticeState, mode: DriftMode) -> Result<Vec<f64>> {
    let mut out = vec![0.0; y.sites()];
    hj_drift_into(y.values(), mode, &mut out);
    check_finite("Hamilton-Jacobi drift", y.values(), &out)?;
    Ok(out)
}

pub fn burgers_drift(u: &LatticeState, mode: DriftMode) -> Result<Vec<f64>> {
    let mut out = vec![0.0; u.sites()];
    burgers_drift_into(u.values(), mode, &mut out);
    check_finite("Burgers drift", u.values(), &out)?;
    Ok(out)
}

/// Second-order truncations: `−(Δ²y + (Δy)²)` and `−(Δ²u + Δ(u²))`.
pub fn quadratic_approx_drift(field: &LatticeState, equation: Equation) -> Vec<f64> {
    let v = field.values();
    let m = v.len();
    let mut d2 = vec![0.0; m];
    delta_into(2, v, &mut d2);
    let mut nl = vec![0.0; m];
    match equation {
        Equation::Hj => delta_into(1, v, &mut nl),
        Equation::Burgers => {
            let sq: Vec<f64> = v.iter().map(|x| x * x).collect();
            delta_into(1, &sq, &mut nl);
        }
    }
    match equation {
        Equation::Hj => d2.iter().zip(&nl).map(|(a, b)| -(a + b * b)).collect(),
        Equation::Burgers => d2.iter().zip(&nl).map(|(a, b)| -(a + b)).collect(),
    }
}

fn heat_level() -> HierarchyLevel {
    HierarchyLevel::new(3).expect("level 3 exists")
}

/// `max_j |ln(heat step of x0) − (HJ step of ln x0)|` for a single Euler step.
pub fn one_step_discrepancy(x0: &LatticeState, dt: f64, dw: &[f64], mode: DriftMode) -> Result<f64> {
    let x = crate::dnls::hierarchy_step(heat_level(), x0, dt, dw)?;
    if let Some((site, &value)) = x.values().iter().enumerate().find(|(_, v)| **v <= 0.0) {
        return Err(Error::PositivityLoss { step: 1, site, value });
    }
    let y0 = log_state(x0.values(), 0)?;
    let mut h = vec![0.0; y0.len()];
    hj_drift_into(&y0, mode, &mut h);
    Ok(x.values()
        .iter()
        .zip(&y0)
        .zip(h.iter().zip(dw))
        .map(|((xj, yj), (hj, wj))| (xj.ln() - (yj + dt * hj + wj)).abs())
        .fold(0.0, f64::max))
}

fn log_state(x: &[f64], step: usize) -> Result<Vec<f64>> {
    x.iter()
        .enumerate()
        .map(|(site, &v)| {
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(Error::PositivityLoss { step, site, value: v })
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathDiscrepancy {
    pub y_max_abs: f64,
    pub u_max_abs: f64,
}

/// Runs the three lattice schemes on one path and compares `ln x` with `y`
/// and `Δ ln x` with `u` at every node.
pub fn compare_on_path(x0: &LatticeState, path: &BrownianPath, mode: DriftMode) -> Result<PathDiscrepancy> {
    let m = x0.sites();
    if m < 3 || path.dim() != m {
        return Err(Error::input(
            "need at least three sites and a path of matching dimension",
        ));
    }
    let grid = path.grid();
    let dt = grid.step();
    let level = heat_level();
    let heat = |s: &[f64], o: &mut [f64]| hierarchy_drift(level, s, o);
    let hj = |s: &[f64], o: &mut [f64]| hj_drift_into(s, mode, o);
    let bu = |s: &[f64], o: &mut [f64]| burgers_drift_into(s, mode, o);
    let mut x = x0.values().to_vec();
    let mut y = log_state(&x, 0)?;
    let mut u = vec![0.0; m];
    delta_into(1, &y, &mut u);
    let (mut dw, mut ddw, mut buf, mut lu) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut out = PathDiscrepancy {
        y_max_abs: 0.0,
        u_max_abs: 0.0,
    };
    for n in 0..grid.n_steps() {
        path.increments_into(n, &mut dw);
        delta_into(1, &dw, &mut ddw);
        step_in_place(&mut x, &heat, &mut buf, dt, &dw, NoiseMode::Multiplicative)?;
        step_in_place(&mut y, &hj, &mut buf, dt, &dw, NoiseMode::Additive)?;
        step_in_place(&mut u, &bu, &mut buf, dt, &ddw, NoiseMode::Additive)?;
        guard(&x, n + 1)?;
        guard(&y, n + 1)?;
        guard(&u, n + 1)?;
        let ly = log_state(&x, n + 1)?;
        delta_into(1, &ly, &mut lu);
        for j in 0..m {
            out.y_max_abs = out.y_max_abs.max((ly[j] - y[j]).abs());
            out.u_max_abs = out.u_max_abs.max((lu[j] - u[j]).abs());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyLevel {
    pub dt: f64,
    pub n_steps: usize,
    pub y_discrepancy: f64,
    pub y_std_error: f64,
    pub u_discrepancy: f64,
    pub u_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub mode: DriftMode,
    pub n_paths: usize,
    pub levels: Vec<ConsistencyLevel>,
    /// `y_discrepancy[i] / y_discrepancy[i+1]`.
    pub y_ratios: Vec<f64>,
    pub u_ratios: Vec<f64>,
}

fn ratios(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|w| w[0] / w[1]).collect()
}

/// Single-path check: `path` is the finest level; each entry of `factors`
/// coarsens it (1 = finest). Levels are reported in the given order.
pub fn consistency_check(
    x0: &LatticeState,
    path: &BrownianPath,
    factors: &[usize],
    mode: DriftMode,
) -> Result<ConsistencyReport> {
    let levels = factors
        .iter()
        .map(|&f| {
            let p = path.coarsen(f)?;
            let d = compare_on_path(x0, &p, mode)?;
            Ok(ConsistencyLevel {
                dt: p.grid().step(),
                n_steps: p.grid().n_steps(),
                y_discrepancy: d.y_max_abs,
                y_std_error: 0.0,
                u_discrepancy: d.u_max_abs,
                u_std_error: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(mode, 1, levels))
}

fn report(mode: DriftMode, n_paths: usize, levels: Vec<ConsistencyLevel>) -> ConsistencyReport {
    let y: Vec<f64> = levels.iter().map(|l| l.y_discrepancy).collect();
    let u: Vec<f64> = levels.iter().map(|l| l.u_discrepancy).collect();
    ConsistencyReport {
        mode,
        n_paths,
        y_ratios: ratios(&y),
        u_ratios: ratios(&u),
        levels,
    }
}

/// Mean per-path max-abs discrepancies over `n_paths` members, each level
/// driven by the same fine Brownian path coarsened by `factors[i]`.
pub fn consistency_ensemble(
    x0: &LatticeState,
    fine: TimeGrid,
    factors: &[usize],
    n_paths: usize,
    seed: u64,
    mode: DriftMode,
) -> Result<ConsistencyReport> {
    if n_paths < 2 {
        return Err(Error::input("need at least two paths"));
    }
    let m = x0.sites();
    let per_path: Vec<Vec<PathDiscrepancy>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let path = BrownianPath::sample_member(m, fine, seed, i)?;
            factors
                .iter()
                .map(|&f| compare_on_path(x0, &path.coarsen(f)?, mode))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let levels = factors
        .iter()
        .enumerate()
        .map(|(l, &f)| {
            let ys: Vec<f64> = per_path.iter().map(|p| p[l].y_max_abs).collect();
            let us: Vec<f64> = per_path.iter().map(|p| p[l].u_max_abs).collect();
            let (sy, su) = (summarize(&ys)?, summarize(&us)?);
            let g = fine.coarsen(f)?;
            Ok(ConsistencyLevel {
                dt: g.step(),
                n_steps: g.n_steps(),
                y_discrepancy: sy.mean,
                y_std_error: sy.std_error,
                u_discrepancy: su.mean,
                u_std_error: su.std_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(mode, n_paths, levels))
}

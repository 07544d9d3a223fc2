//! Python bindings for `feynkac`.
//!
//! Scalar fields passed from Python are callables taking a list of floats
//! (one entry per coordinate). They run with the interpreter attached, so
//! they serialize the parallel ensembles; the built-in operations do not.

use std::f64::consts::PI;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyList;
use serde::Serialize;

use feynkac::colehopf::{self, DriftMode};
use feynkac::continuum::{self, LatticeField, RefinementLadder};
use feynkac::dnls::{self, HierarchyLevel, LatticeState, Route};
use feynkac::feynman_kac::{self as fk, BridgeOptions, Direction, EnsembleOptions, Quadrature, SpaceGrid};
use feynkac::lamperti;
use feynkac::paths;
use feynkac::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Input(_) | Error::Capability(_) => PyValueError::new_err(format!("{}: {e}", e.kind())),
        _ => PyRuntimeError::new_err(format!("{}: {e}", e.kind())),
    }
}

fn to_dict<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn scalar_field(f: Py<PyAny>) -> impl Fn(&[f64]) -> f64 + Send + Sync + 'static {
    move |x: &[f64]| {
        Python::attach(|py| {
            f.call1(py, (x.to_vec(),))
                .and_then(|v| v.extract::<f64>(py))
                .unwrap_or(f64::NAN)
        })
    }
}

fn vector_field(f: Py<PyAny>) -> impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static {
    move |x: &[f64], out: &mut [f64]| {
        let v = Python::attach(|py| f.call1(py, (x.to_vec(),)).and_then(|v| v.extract::<Vec<f64>>(py)).ok());
        match v {
            Some(v) if v.len() == out.len() => out.copy_from_slice(&v),
            _ => out.fill(f64::NAN),
        }
    }
}

fn quadrature(name: &str) -> PyResult<Quadrature> {
    match name {
        "left" => Ok(Quadrature::LeftEndpoint),
        "trapezoid" => Ok(Quadrature::Trapezoid),
        _ => Err(PyValueError::new_err(format!(
            "quadrature must be 'left' or 'trapezoid', got '{name}'"
        ))),
    }
}

fn drift_mode(name: &str) -> PyResult<DriftMode> {
    match name {
        "ito" | "ito_derived" => Ok(DriftMode::ItoDerived),
        "paper" | "paper_literal" => Ok(DriftMode::PaperLiteral),
        _ => Err(PyValueError::new_err(format!(
            "mode must be 'ito' or 'paper', got '{name}'"
        ))),
    }
}

#[pyclass(name = "TimeGrid", module = "pyfeynkac", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyTimeGrid(paths::TimeGrid);

#[pymethods]
impl PyTimeGrid {
    #[new]
    #[pyo3(signature = (horizon, n_steps, t_start = 0.0))]
    fn new(horizon: f64, n_steps: usize, t_start: f64) -> PyResult<Self> {
        paths::TimeGrid::new(t_start, t_start + horizon, n_steps)
            .map(Self)
            .map_err(to_py)
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.0.n_steps()
    }

    #[getter]
    fn step(&self) -> f64 {
        self.0.step()
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.0.horizon()
    }

    fn times(&self) -> Vec<f64> {
        self.0.times()
    }

    fn __repr__(&self) -> String {
        format!("TimeGrid(horizon={}, n_steps={})", self.0.horizon(), self.0.n_steps())
    }
}

#[pyclass(name = "BrownianPath", module = "pyfeynkac", frozen)]
struct PyBrownianPath(paths::BrownianPath);

#[pymethods]
impl PyBrownianPath {
    #[staticmethod]
    #[pyo3(signature = (dim, grid, seed, member = 0))]
    fn sample(dim: usize, grid: &PyTimeGrid, seed: u64, member: u64) -> PyResult<Self> {
        paths::BrownianPath::sample_member(dim, grid.0, seed, member)
            .map(Self)
            .map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn increments(&self, site: usize) -> PyResult<Vec<f64>> {
        if site >= self.0.dim() {
            return Err(PyValueError::new_err(format!("site {site} out of range")));
        }
        Ok(self.0.site_increments(site).to_vec())
    }

    fn values_at(&self, t_idx: usize) -> PyResult<Vec<f64>> {
        self.0.values_at(t_idx).map_err(to_py)
    }

    fn coarsen(&self, factor: usize) -> PyResult<Self> {
        self.0.coarsen(factor).map(Self).map_err(to_py)
    }
}

#[pyclass(name = "FourierBridge", module = "pyfeynkac", frozen)]
struct PyFourierBridge(paths::FourierBridge);

#[pymethods]
impl PyFourierBridge {
    #[staticmethod]
    #[pyo3(signature = (endpoint, horizon, n_modes = paths::DEFAULT_BRIDGE_MODES, seed = 0, member = 0))]
    fn pinned(endpoint: Vec<f64>, horizon: f64, n_modes: usize, seed: u64, member: u64) -> PyResult<Self> {
        paths::FourierBridge::pinned(&endpoint, horizon, n_modes, seed, member)
            .map(Self)
            .map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (dim, horizon, n_modes = paths::DEFAULT_BRIDGE_MODES, seed = 0, member = 0))]
    fn free(dim: usize, horizon: f64, n_modes: usize, seed: u64, member: u64) -> PyResult<Self> {
        paths::FourierBridge::free(dim, horizon, n_modes, seed, member)
            .map(Self)
            .map_err(to_py)
    }

    fn eval(&self, s: f64) -> PyResult<Vec<f64>> {
        self.0.eval(s).map_err(to_py)
    }

    #[getter]
    fn endpoint(&self) -> Vec<f64> {
        self.0.endpoint().to_vec()
    }
}

#[pyclass(name = "SheetSample", module = "pyfeynkac", frozen)]
struct PySheetSample(paths::SheetSample);

#[pymethods]
impl PySheetSample {
    #[new]
    #[pyo3(signature = (half_period, n_modes, grid, seed, member = 0))]
    fn new(half_period: f64, n_modes: usize, grid: &PyTimeGrid, seed: u64, member: u64) -> PyResult<Self> {
        paths::SheetSample::sample(half_period, n_modes, grid.0, seed, member)
            .map(Self)
            .map_err(to_py)
    }

    fn eval(&self, x: f64, t_idx: usize) -> PyResult<f64> {
        self.0.eval(x, t_idx).map_err(to_py)
    }

    fn eval_many(&self, xs: Vec<f64>, t_idx: usize) -> PyResult<Vec<f64>> {
        self.0.eval_many(&xs, t_idx).map_err(to_py)
    }
}

#[pyclass(name = "DiffusionModel", module = "pyfeynkac", frozen)]
struct PyDiffusionModel(lamperti::DiffusionModel);

#[pymethods]
impl PyDiffusionModel {
    /// σ = s·x, b = μx.
    #[staticmethod]
    fn gbm(mu: f64, s: f64) -> Self {
        Self(lamperti::DiffusionModel::gbm(mu, s))
    }

    #[staticmethod]
    fn constant(mu: f64, s: f64) -> Self {
        Self(lamperti::DiffusionModel::constant(mu, s))
    }

    /// σ = s·√x, b = κ(θ − x).
    #[staticmethod]
    fn cir_like(kappa: f64, theta: f64, s: f64) -> Self {
        Self(lamperti::DiffusionModel::cir_like(kappa, theta, s))
    }

    /// Same model with the σ-derivative taken by central differences.
    fn finite_differences(&self) -> Self {
        Self(
            self.0
                .clone()
                .without_sigma_grad()
                .with_finite_differences(Some(lamperti::FiniteDiff::default())),
        )
    }

    fn induced_drift(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        lamperti::induced_drift(&self.0, &x).map_err(to_py)
    }

    fn drift(&self, x: Vec<f64>) -> Vec<f64> {
        self.0.drift(&x)
    }
}

#[pyclass(name = "FKProblem", module = "pyfeynkac", frozen)]
struct PyFKProblem(fk::FKProblem);

#[pymethods]
impl PyFKProblem {
    /// `condition`, `potential` and `drift` take a list of coordinates;
    /// `drift` returns one value per coordinate.
    #[new]
    #[pyo3(signature = (dim, horizon, condition, direction = "backward", potential = None, drift = None))]
    fn new(
        dim: usize,
        horizon: f64,
        condition: Py<PyAny>,
        direction: &str,
        potential: Option<Py<PyAny>>,
        drift: Option<Py<PyAny>>,
    ) -> PyResult<Self> {
        let direction = match direction {
            "backward" => Direction::Backward,
            "forward" => Direction::Forward,
            _ => return Err(PyValueError::new_err("direction must be 'backward' or 'forward'")),
        };
        let mut p = fk::FKProblem::new(dim, horizon, direction, scalar_field(condition)).map_err(to_py)?;
        if let Some(u) = potential {
            p = p.with_potential(scalar_field(u));
        }
        if let Some(b) = drift {
            p = p.with_drift(vector_field(b));
        }
        Ok(Self(p))
    }

    /// Standard-normal initial condition, no drift, optional harmonic potential −|x|²/2.
    #[staticmethod]
    #[pyo3(signature = (dim, horizon, harmonic = false))]
    fn gaussian_heat(dim: usize, horizon: f64, harmonic: bool) -> PyResult<Self> {
        let p = fk::FKProblem::backward(dim, horizon, |x| {
            x.iter().map(|v| (-0.5 * v * v).exp() / (2.0 * PI).sqrt()).product()
        })
        .map_err(to_py)?;
        Ok(Self(if harmonic {
            p.with_potential(|x| -0.5 * x.iter().map(|v| v * v).sum::<f64>())
        } else {
            p
        }))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.0.horizon()
    }
}

#[pyfunction]
#[pyo3(signature = (problem, x, n_paths, n_steps, seed = 0, quadrature = "left"))]
fn solve_pointwise(
    py: Python<'_>,
    problem: &PyFKProblem,
    x: Vec<f64>,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    quadrature: &str,
) -> PyResult<Py<PyAny>> {
    let opts = EnsembleOptions::new(n_paths, n_steps, seed).with_quadrature(self::quadrature(quadrature)?);
    let e = py
        .detach(|| fk::solve_pointwise(&problem.0, &x, &opts))
        .map_err(to_py)?;
    to_dict(py, &e)
}

#[pyfunction]
#[pyo3(signature = (problem, y_i, y_f, n_bridges, n_steps, n_modes = paths::DEFAULT_BRIDGE_MODES, seed = 0, quadrature = "left"))]
#[allow(clippy::too_many_arguments)]
fn propagator_free(
    py: Python<'_>,
    problem: &PyFKProblem,
    y_i: Vec<f64>,
    y_f: Vec<f64>,
    n_bridges: usize,
    n_steps: usize,
    n_modes: usize,
    seed: u64,
    quadrature: &str,
) -> PyResult<Py<PyAny>> {
    let mut opts = BridgeOptions::new(n_bridges, n_steps, n_modes, seed);
    opts.quadrature = self::quadrature(quadrature)?;
    let e = py
        .detach(|| fk::propagator_free(&problem.0, &y_i, &y_f, &opts))
        .map_err(to_py)?;
    to_dict(py, &e)
}

/// ⟨g(x_s)⟩ under the weight exp(∫u), paths started at `start`.
#[pyfunction]
#[pyo3(signature = (problem, start, s, observable, n_paths, n_steps, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn expectation_ratio(
    py: Python<'_>,
    problem: &PyFKProblem,
    start: Vec<f64>,
    s: f64,
    observable: Py<PyAny>,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let g = scalar_field(observable);
    let opts = EnsembleOptions::new(n_paths, n_steps, seed);
    let e = py
        .detach(|| fk::expectation_ratio(&problem.0, &start, s, &g, &opts))
        .map_err(to_py)?;
    to_dict(py, &e)
}

/// Crank-Nicolson reference on [−half_width, half_width]; returns (xs, values).
#[pyfunction]
#[pyo3(signature = (problem, half_width = 10.0, dx = 1.0 / 512.0, n_time_steps = 1000))]
fn pde_oracle_1d(
    py: Python<'_>,
    problem: &PyFKProblem,
    half_width: f64,
    dx: f64,
    n_time_steps: usize,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let space = SpaceGrid::symmetric(half_width, dx).map_err(to_py)?;
    let sol = py
        .detach(|| fk::pde_oracle_1d(&problem.0, &space, n_time_steps))
        .map_err(to_py)?;
    Ok((sol.xs, sol.values))
}

fn level(k: u8, rescale_time: bool) -> PyResult<HierarchyLevel> {
    Ok(HierarchyLevel::new(k).map_err(to_py)?.with_rescale_time(rescale_time))
}

#[pyfunction]
#[pyo3(signature = (k, x, dt, dw, rescale_time = true))]
fn hierarchy_step(k: u8, x: Vec<f64>, dt: f64, dw: Vec<f64>, rescale_time: bool) -> PyResult<Vec<f64>> {
    let state = LatticeState::new(x).map_err(to_py)?;
    dnls::hierarchy_step(level(k, rescale_time)?, &state, dt, &dw)
        .map(LatticeState::into_values)
        .map_err(to_py)
}

/// Terminal lattice states of `n_paths` trajectories.
#[pyfunction]
#[pyo3(signature = (k, x0, grid, n_paths, seed = 0, route = "direct", zero_noise = false, rescale_time = true))]
#[allow(clippy::too_many_arguments)]
fn dnls_ensemble(
    py: Python<'_>,
    k: u8,
    x0: Vec<f64>,
    grid: &PyTimeGrid,
    n_paths: usize,
    seed: u64,
    route: &str,
    zero_noise: bool,
    rescale_time: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let route = match route {
        "direct" => Route::Direct,
        "integrator" => Route::Integrator,
        _ => return Err(PyValueError::new_err("route must be 'direct' or 'integrator'")),
    };
    let level = level(k, rescale_time)?;
    let g = grid.0;
    let trajs = py
        .detach(|| dnls::ensemble(route, level, &x0, g, n_paths, seed, zero_noise))
        .map_err(to_py)?;
    Ok(trajs.iter().map(|t| t.terminal().to_vec()).collect())
}

/// Direct and path-ordered solutions on the same Brownian path; returns both terminal states.
#[pyfunction]
#[pyo3(signature = (k, x0, path, rescale_time = true))]
fn compare_routes(k: u8, x0: Vec<f64>, path: &PyBrownianPath, rescale_time: bool) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let level = level(k, rescale_time)?;
    let a = dnls::direct_solve(level, &x0, &path.0).map_err(to_py)?;
    let b = dnls::path_ordered_solve(level, &x0, &path.0).map_err(to_py)?;
    Ok((a.terminal().to_vec(), b.terminal().to_vec()))
}

#[pyfunction]
#[pyo3(signature = (y, mode = "ito"))]
fn hj_drift(y: Vec<f64>, mode: &str) -> PyResult<Vec<f64>> {
    colehopf::hj_drift(&LatticeState::new(y).map_err(to_py)?, drift_mode(mode)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (u, mode = "ito"))]
fn burgers_drift(u: Vec<f64>, mode: &str) -> PyResult<Vec<f64>> {
    colehopf::burgers_drift(&LatticeState::new(u).map_err(to_py)?, drift_mode(mode)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (x0, fine_grid, factors, n_paths, seed = 0, mode = "ito"))]
fn consistency_ensemble(
    py: Python<'_>,
    x0: Vec<f64>,
    fine_grid: &PyTimeGrid,
    factors: Vec<usize>,
    n_paths: usize,
    seed: u64,
    mode: &str,
) -> PyResult<Py<PyAny>> {
    let x0 = LatticeState::new(x0).map_err(to_py)?;
    let mode = drift_mode(mode)?;
    let g = fine_grid.0;
    let r = py
        .detach(|| colehopf::consistency_ensemble(&x0, g, &factors, n_paths, seed, mode))
        .map_err(to_py)?;
    to_dict(py, &r)
}

/// Grid-refinement study with initial profile 1 + a·sin(πx/L); `observable`
/// is "sine" (δΣφ sin(πx/L)) or "mass" (δΣφ).
#[pyfunction]
#[pyo3(signature = (k, base_sites, base_steps, levels, horizon, n_paths, seed = 0, observable = "sine", amplitude = 0.5, sheet_modes = 32, zero_noise = false))]
#[allow(clippy::too_many_arguments)]
fn refine_experiment(
    py: Python<'_>,
    k: u8,
    base_sites: usize,
    base_steps: usize,
    levels: usize,
    horizon: f64,
    n_paths: usize,
    seed: u64,
    observable: &str,
    amplitude: f64,
    sheet_modes: usize,
    zero_noise: bool,
) -> PyResult<Py<PyAny>> {
    let ladder = RefinementLadder::new(base_sites, base_steps, levels, horizon)
        .and_then(|l| l.with_sheet_modes(sheet_modes))
        .map_err(to_py)?;
    let init = continuum::sine_profile(amplitude, 1.0);
    let sine = |f: &LatticeField| f.spacing * f.xs.iter().zip(&f.values).map(|(x, v)| v * (PI * x).sin()).sum::<f64>();
    let mass = |f: &LatticeField| f.mass();
    let obs: &(dyn Fn(&LatticeField) -> f64 + Sync) = match observable {
        "sine" => &sine,
        "mass" => &mass,
        _ => return Err(PyValueError::new_err("observable must be 'sine' or 'mass'")),
    };
    let r = py
        .detach(|| continuum::refine_experiment(k, &ladder, &init, obs, n_paths, seed, zero_noise))
        .map_err(to_py)?;
    to_dict(py, &r)
}

/// Runs the `feynkac` command line with the given arguments; returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Bound<'_, PyList>) -> PyResult<i32> {
    let mut argv = vec!["feynkac".to_string()];
    argv.extend(args.extract::<Vec<String>>()?);
    Ok(py.detach(|| feynkac::cli::main_with_args(argv)))
}

#[pymodule]
fn pyfeynkac(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTimeGrid>()?;
    m.add_class::<PyBrownianPath>()?;
    m.add_class::<PyFourierBridge>()?;
    m.add_class::<PySheetSample>()?;
    m.add_class::<PyDiffusionModel>()?;
    m.add_class::<PyFKProblem>()?;
    m.add_function(wrap_pyfunction!(solve_pointwise, m)?)?;
    m.add_function(wrap_pyfunction!(propagator_free, m)?)?;
    m.add_function(wrap_pyfunction!(expectation_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(pde_oracle_1d, m)?)?;
    m.add_function(wrap_pyfunction!(hierarchy_step, m)?)?;
    m.add_function(wrap_pyfunction!(dnls_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(compare_routes, m)?)?;
    m.add_function(wrap_pyfunction!(hj_drift, m)?)?;
    m.add_function(wrap_pyfunction!(burgers_drift, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(refine_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("MODE_OFFSET", colehopf::MODE_OFFSET)?;
    Ok(())
}

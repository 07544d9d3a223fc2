//! Second-order operators `L̂ = ½ Σ g_ij ∂_ij + Σ b_j ∂_j + u` with
//! `g = σσᵀ`, and the change of frame `dy = σ⁻¹ dx` that turns them into
//! unit-diffusion operators with an induced drift.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type MatrixField = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
/// `grad(x)[l]` is the matrix `∂σ/∂x_l`.
pub type MatrixGradient = Arc<dyn Fn(&[f64]) -> Vec<DMatrix<f64>> + Send + Sync>;
pub type VectorField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Central-difference steps.
///
/// First derivatives use `h = max(rel_step·|x|, abs_floor)`. Second
/// derivatives use the larger `h₂ = max(second_rel_step·|x|, second_abs_floor)`
/// so that rounding (∝ ε/h₂²) stays near 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDiff {
    pub rel_step: f64,
    pub abs_floor: f64,
    pub second_rel_step: f64,
    pub second_abs_floor: f64,
}

impl Default for FiniteDiff {
    fn default() -> Self {
        Self {
            rel_step: 1e-5,
            abs_floor: 1e-8,
            second_rel_step: 1e-4,
            second_abs_floor: 1e-4,
        }
    }
}

impl FiniteDiff {
    fn first(&self, x: f64) -> f64 {
        (self.rel_step * x.abs()).max(self.abs_floor)
    }

    fn second(&self, x: f64) -> f64 {
        (self.second_rel_step * x.abs()).max(self.second_abs_floor)
    }
}

/// The operator data `(σ, b, u)` on `R^M`.
#[derive(Clone)]
pub struct DiffusionModel {
    dim: usize,
    sigma: MatrixField,
    sigma_grad: Option<MatrixGradient>,
    drift: VectorField,
    potential: ScalarField,
    fd: Option<FiniteDiff>,
}

impl fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("dim", &self.dim)
            .field("analytic_sigma_grad", &self.sigma_grad.is_some())
            .field("fd", &self.fd)
            .finish()
    }
}

impl DiffusionModel {
    /// Model with zero potential and finite-difference derivatives of σ.
    pub fn new(
        dim: usize,
        sigma: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        drift: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("model dimension must be at least 1"));
        }
        Ok(Self {
            dim,
            sigma: Arc::new(sigma),
            sigma_grad: None,
            drift: Arc::new(drift),
            potential: Arc::new(|_| 0.0),
            fd: Some(FiniteDiff::default()),
        })
    }

    /// One-dimensional model from scalar `σ(x)` and `b(x)`.
    pub fn scalar(
        sigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        drift: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            1,
            move |x| DMatrix::from_element(1, 1, sigma(x[0])),
            move |x| vec![drift(x[0])],
        )
        .expect("dimension 1 is valid")
    }

    pub fn with_potential(mut self, u: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.potential = Arc::new(u);
        self
    }

    pub fn with_sigma_grad(mut self, grad: impl Fn(&[f64]) -> Vec<DMatrix<f64>> + Send + Sync + 'static) -> Self {
        self.sigma_grad = Some(Arc::new(grad));
        self
    }

    /// Scalar σ′ for one-dimensional models.
    pub fn with_scalar_sigma_grad(self, dsigma: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.with_sigma_grad(move |x| vec![DMatrix::from_element(1, 1, dsigma(x[0]))])
    }

    /// `None` disables finite differences; derivative-dependent operations then
    /// need an analytic gradient.
    pub fn with_finite_differences(mut self, fd: Option<FiniteDiff>) -> Self {
        self.fd = fd;
        self
    }

    pub fn without_sigma_grad(mut self) -> Self {
        self.sigma_grad = None;
        self
    }

    /// `dx = μx dt + s·x dw`.
    pub fn gbm(mu: f64, s: f64) -> Self {
        Self::scalar(move |x| s * x, move |x| mu * x).with_scalar_sigma_grad(move |_| s)
    }

    /// `dx = μ dt + s dw`.
    pub fn constant(mu: f64, s: f64) -> Self {
        Self::scalar(move |_| s, move |_| mu).with_scalar_sigma_grad(|_| 0.0)
    }

    /// `dx = κ(θ − x) dt + s√x dw`.
    pub fn cir_like(kappa: f64, theta: f64, s: f64) -> Self {
        Self::scalar(move |x| s * x.sqrt(), move |x| kappa * (theta - x))
            .with_scalar_sigma_grad(move |x| 0.5 * s / x.sqrt())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self, x: &[f64]) -> DMatrix<f64> {
        (self.sigma)(x)
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        (self.drift)(x)
    }

    pub fn potential(&self, x: &[f64]) -> f64 {
        (self.potential)(x)
    }

    pub fn finite_differences(&self) -> Option<FiniteDiff> {
        self.fd
    }

    /// `g = σσᵀ` after checking it is positive definite at `x`.
    pub fn diffusion_matrix(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let sigma = self.checked_sigma(x)?;
        Ok(&sigma * sigma.transpose())
    }

    fn checked_sigma(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let sigma = self.sigma(x);
        if sigma.nrows() != self.dim || sigma.ncols() != self.dim {
            return Err(Error::input(format!(
                "sigma returned a {}x{} matrix, expected {d}x{d}",
                sigma.nrows(),
                sigma.ncols(),
                d = self.dim
            )));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("sigma", x));
        }
        let g = &sigma * sigma.transpose();
        if g.cholesky().is_none() {
            return Err(Error::Singularity {
                point: x.to_vec(),
                reason: "g = σσᵀ is not positive definite".into(),
            });
        }
        Ok(sigma)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::input(format!(
                "point has {} coordinates, model dimension is {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// `∂σ/∂x_l` for every `l`, analytic when available.
    pub fn sigma_derivatives(&self, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        self.check_point(x)?;
        if let Some(grad) = &self.sigma_grad {
            let d = grad(x);
            if d.len() != self.dim {
                return Err(Error::input("sigma gradient has the wrong number of components"));
            }
            return Ok(d);
        }
        let fd = self.fd.ok_or_else(|| {
            Error::Capability("no analytic sigma gradient and finite differences are disabled".into())
        })?;
        let mut out = Vec::with_capacity(self.dim);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        for l in 0..self.dim {
            let h = fd.first(x[l]);
            xp[l] = x[l] + h;
            xm[l] = x[l] - h;
            out.push((self.sigma(&xp) - self.sigma(&xm)) / (xp[l] - xm[l]));
            xp[l] = x[l];
            xm[l] = x[l];
        }
        Ok(out)
    }
}

/// Drift of the unit-diffusion frame, `b̃ = σ⁻¹(b − ½ v)` with
/// `v_j = Σ_l ∂_{y_l} σ_{jl}` and `∂_{y_l} = Σ_m σ_{ml} ∂_{x_m}`.
///
/// Componentwise this is `b̃_k = Σ_j σ⁻¹_{kj} b_j + ½ Σ_{j,l} σ_{jl} ∂_{y_l} σ⁻¹_{kj}`,
/// the Itô drift of `y` when `dy = σ⁻¹ dx` is integrable.
pub fn induced_drift(model: &DiffusionModel, x: &[f64]) -> Result<Vec<f64>> {
    let sigma = model.checked_sigma(x)?;
    let dsigma = model.sigma_derivatives(x)?;
    let m = model.dim();
    let b = model.drift(x);
    if b.len() != m {
        return Err(Error::input("drift has the wrong dimension"));
    }
    let mut rhs = DVector::from_vec(b);
    for j in 0..m {
        let mut v = 0.0;
        for l in 0..m {
            for (mm, d) in dsigma.iter().enumerate() {
                v += sigma[(mm, l)] * d[(j, l)];
            }
        }
        rhs[j] -= 0.5 * v;
    }
    let out = sigma.lu().solve(&rhs).ok_or_else(|| Error::Singularity {
        point: x.to_vec(),
        reason: "sigma is not invertible".into(),
    })?;
    let out: Vec<f64> = out.iter().copied().collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("induced drift", x));
    }
    Ok(out)
}

/// `b/σ − σ′/2`, the scalar form of [`induced_drift`].
pub fn scalar_induced_drift(b: f64, sigma: f64, dsigma: f64) -> f64 {
    b / sigma - 0.5 * dsigma
}

const QUAD_TOL: f64 = 1e-10;
const QUAD_MAX_DEPTH: u32 = 48;

/// `y(x) = ∫_{x_ref}^{x} dξ/σ(ξ)` for a one-dimensional model.
pub fn lamperti_map_1d(model: &DiffusionModel, x: f64, x_ref: f64) -> Result<f64> {
    if model.dim() != 1 {
        return Err(Error::Capability(
            "built-in coordinate map is one-dimensional; supply y(x) and x(y) for M > 1".into(),
        ));
    }
    if x == x_ref {
        return Ok(0.0);
    }
    let s_ref = model.sigma(&[x_ref])[(0, 0)];
    if s_ref == 0.0 || !s_ref.is_finite() {
        return Err(Error::Singularity {
            point: vec![x_ref],
            reason: "sigma vanishes at the reference point".into(),
        });
    }
    let sign = s_ref.signum();
    let integrand = |xi: f64| -> Result<f64> {
        let s = model.sigma(&[xi])[(0, 0)];
        if !s.is_finite() || s == 0.0 || s.signum() != sign {
            return Err(Error::Singularity {
                point: vec![xi],
                reason: "sigma vanishes or changes sign on the integration interval".into(),
            });
        }
        Ok(1.0 / s)
    };
    adaptive_simpson(&integrand, x_ref, x, QUAD_TOL)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> Result<f64>, a: f64, b: f64, tol: f64) -> Result<f64> {
    let fa = f(a)?;
    let fb = f(b)?;
    let m = 0.5 * (a + b);
    let fm = f(m)?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, QUAD_MAX_DEPTH)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &dyn Fn(f64) -> Result<f64>,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::Singularity {
            point: vec![m],
            reason: "quadrature of 1/sigma did not converge (integrand singular?)".into(),
        });
    }
    Ok(simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
}

/// A test function for [`apply_operator`], with optional analytic derivatives.
#[derive(Clone)]
pub struct TestFunction {
    value: ScalarField,
    gradient: Option<VectorField>,
    hessian: Option<MatrixField>,
}

impl TestFunction {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            value: Arc::new(f),
            gradient: None,
            hessian: None,
        }
    }

    pub fn with_derivatives(
        mut self,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        hessian: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self.hessian = Some(Arc::new(hessian));
        self
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorMode {
    /// `½ Σ g_ij ∂_ij f + Σ b_j ∂_j f + u f`
    Generator,
    /// `½ Σ ∂_ij (g_ij f) − Σ ∂_j (b_j f) + u f`
    Adjoint,
}

/// Applies the generator or its formal adjoint to `f` at `x`.
///
/// The adjoint always differentiates the products `g_ij f` and `b_j f`
/// numerically; the generator uses the analytic derivatives of `f` when given.
pub fn apply_operator(model: &DiffusionModel, f: &TestFunction, x: &[f64], mode: OperatorMode) -> Result<f64> {
    let m = model.dim();
    let g = model.diffusion_matrix(x)?;
    let u = model.potential(x);
    let fx = f.value(x);
    let fd = model.fd.unwrap_or_default();
    let out = match mode {
        OperatorMode::Generator => {
            let b = model.drift(x);
            let grad = match &f.gradient {
                Some(df) => df(x),
                None => gradient_fd(&|p| f.value(p), x, &fd),
            };
            let hess = match &f.hessian {
                Some(h) => h(x),
                None => hessian_fd(&|p| f.value(p), x, &fd),
            };
            let mut acc = u * fx;
            for i in 0..m {
                acc += b[i] * grad[i];
                for j in 0..m {
                    acc += 0.5 * g[(i, j)] * hess[(i, j)];
                }
            }
            acc
        }
        OperatorMode::Adjoint => {
            let mut acc = u * fx;
            for i in 0..m {
                for j in 0..m {
                    let gij = |p: &[f64]| (&model.sigma(p) * model.sigma(p).transpose())[(i, j)] * f.value(p);
                    acc += 0.5 * second_partial_fd(&gij, x, i, j, &fd);
                }
                let bf = |p: &[f64]| model.drift(p)[i] * f.value(p);
                acc -= partial_fd(&bf, x, i, &fd);
            }
            acc
        }
    };
    if !out.is_finite() {
        return Err(Error::numeric("operator application", x));
    }
    Ok(out)
}

fn partial_fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, fd: &FiniteDiff) -> f64 {
    let h = fd.first(x[i]);
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let fp = f(&p);
    p[i] = x[i] - h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

fn gradient_fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], fd: &FiniteDiff) -> Vec<f64> {
    (0..x.len()).map(|i| partial_fd(f, x, i, fd)).collect()
}

fn second_partial_fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, j: usize, fd: &FiniteDiff) -> f64 {
    let hi = fd.second(x[i]);
    let mut p = x.to_vec();
    if i == j {
        let f0 = f(x);
        p[i] = x[i] + hi;
        let fp = f(&p);
        p[i] = x[i] - hi;
        let fm = f(&p);
        return (fp - 2.0 * f0 + fm) / (hi * hi);
    }
    let hj = fd.second(x[j]);
    let mut eval = |si: f64, sj: f64| {
        p[i] = x[i] + si * hi;
        p[j] = x[j] + sj * hj;
        f(&p)
    };
    (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * hi * hj)
}

fn hessian_fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], fd: &FiniteDiff) -> DMatrix<f64> {
    let m = x.len();
    DMatrix::from_fn(m, m, |i, j| second_partial_fd(f, x, i, j, fd))
}

pub type CoordinateMap = Arc<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;

/// The operator in the unit-diffusion frame: drift `b̃(y)` and potential
/// `u(x(y))`, together with the coordinate maps between frames.
#[derive(Clone)]
pub struct TransformedModel {
    dim: usize,
    source: DiffusionModel,
    to_y: CoordinateMap,
    to_x: CoordinateMap,
}

impl fmt::Debug for TransformedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransformedModel").field("dim", &self.dim).finish()
    }
}

impl TransformedModel {
    /// Caller-supplied maps, required for `M > 1`.
    pub fn from_maps(
        model: DiffusionModel,
        to_y: impl Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
        to_x: impl Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim: model.dim(),
            source: model,
            to_y: Arc::new(to_y),
            to_x: Arc::new(to_x),
        }
    }

    /// Built-in one-dimensional frame `y = ∫_{x_ref}^x dξ/σ(ξ)`. The inverse
    /// map is found by safeguarded Newton iteration inside `bracket`.
    pub fn from_1d(model: DiffusionModel, x_ref: f64, bracket: (f64, f64)) -> Result<Self> {
        if model.dim() != 1 {
            return Err(Error::Capability(
                "built-in coordinate map is one-dimensional; use from_maps for M > 1".into(),
            ));
        }
        let (lo, hi) = bracket;
        if !(lo < x_ref && x_ref < hi) {
            return Err(Error::input("bracket must contain the reference point"));
        }
        let fwd = model.clone();
        let inv = model.clone();
        Ok(Self {
            dim: 1,
            source: model,
            to_y: Arc::new(move |x| Ok(vec![lamperti_map_1d(&fwd, x[0], x_ref)?])),
            to_x: Arc::new(move |y| Ok(vec![invert_1d(&inv, y[0], x_ref, lo, hi)?])),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> &DiffusionModel {
        &self.source
    }

    pub fn to_y(&self, x: &[f64]) -> Result<Vec<f64>> {
        (self.to_y)(x)
    }

    pub fn to_x(&self, y: &[f64]) -> Result<Vec<f64>> {
        (self.to_x)(y)
    }

    pub fn drift(&self, y: &[f64]) -> Result<Vec<f64>> {
        induced_drift(&self.source, &self.to_x(y)?)
    }

    pub fn potential(&self, y: &[f64]) -> Result<f64> {
        Ok(self.source.potential(&self.to_x(y)?))
    }

    /// The transformed operator as a [`DiffusionModel`] with `σ = I`. Map
    /// failures surface as NaN drift values.
    pub fn unit_diffusion_model(&self) -> DiffusionModel {
        let dim = self.dim;
        let drift_of = self.clone();
        let pot_of = self.clone();
        DiffusionModel::new(
            dim,
            move |_| DMatrix::identity(dim, dim),
            move |y| drift_of.drift(y).unwrap_or_else(|_| vec![f64::NAN; dim]),
        )
        .expect("dimension already validated")
        .with_potential(move |y| pot_of.potential(y).unwrap_or(f64::NAN))
        .with_sigma_grad(move |_| vec![DMatrix::zeros(dim, dim); dim])
    }
}

fn invert_1d(model: &DiffusionModel, target: f64, x_ref: f64, mut lo: f64, mut hi: f64) -> Result<f64> {
    let y_lo = lamperti_map_1d(model, lo, x_ref)?;
    let y_hi = lamperti_map_1d(model, hi, x_ref)?;
    let increasing = y_hi > y_lo;
    let (ymin, ymax) = if increasing { (y_lo, y_hi) } else { (y_hi, y_lo) };
    if !(ymin..=ymax).contains(&target) {
        return Err(Error::input(format!(
            "y = {target} is outside the image [{ymin}, {ymax}] of the bracket"
        )));
    }
    let mut x = x_ref;
    for _ in 0..200 {
        let r = lamperti_map_1d(model, x, x_ref)? - target;
        if r.abs() < 1e-12 {
            return Ok(x);
        }
        if (r > 0.0) == increasing {
            hi = x;
        } else {
            lo = x;
        }
        // dy/dx = 1/σ, so the Newton step is −r·σ
        let newton = x - r * model.sigma(&[x])[(0, 0)];
        x = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 * x.abs().max(1.0) {
            return Ok(x);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_frame_leaves_drift_unchanged() {
        let model = DiffusionModel::new(2, |_| DMatrix::identity(2, 2), |x| vec![x[0] - 3.0, 2.0 * x[1]]).unwrap();
        let d = induced_drift(&model, &[1.5, -0.5]).unwrap();
        assert_eq!(d, vec![-1.5, -1.0]);
    }

    #[test]
    fn gbm_induced_drift() {
        let model = DiffusionModel::gbm(1.0, 1.0);
        assert_abs_diff_eq!(induced_drift(&model, &[2.0]).unwrap()[0], 0.5, epsilon = 1e-12);
        let fd = model.clone().without_sigma_grad();
        assert_abs_diff_eq!(induced_drift(&fd, &[2.0]).unwrap()[0], 0.5, epsilon = 1e-8);
    }

    #[test]
    fn constant_diagonal_sigma() {
        let model = DiffusionModel::new(2, |_| DMatrix::from_diagonal_element(2, 2, 2.0), |_| vec![2.0, 4.0]).unwrap();
        // finite differences of a constant σ are exactly zero
        assert_eq!(induced_drift(&model, &[0.3, 7.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn analytic_and_fd_gradients_agree() {
        // σ = [[1 + x0², 0.3 x1], [sin x0, 2 + x1²/4]]
        let sigma = |x: &[f64]| {
            DMatrix::from_row_slice(
                2,
                2,
                &[1.0 + x[0] * x[0], 0.3 * x[1], x[0].sin(), 2.0 + 0.25 * x[1] * x[1]],
            )
        };
        let grad = |x: &[f64]| {
            vec![
                DMatrix::from_row_slice(2, 2, &[2.0 * x[0], 0.0, x[0].cos(), 0.0]),
                DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 0.0, 0.5 * x[1]]),
            ]
        };
        let drift = |x: &[f64]| vec![x[1], -x[0]];
        let fd_model = DiffusionModel::new(2, sigma, drift).unwrap();
        let an_model = fd_model.clone().with_sigma_grad(grad);
        for p in [[0.2, -0.4], [1.1, 0.9], [-0.7, 1.5]] {
            let a = induced_drift(&an_model, &p).unwrap();
            let b = induced_drift(&fd_model, &p).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn componentwise_formula_matches_compact_form() {
        // b̃_k = Σ_j σ⁻¹_kj b_j + ½ Σ_{j,l} σ_jl ∂_{y_l} σ⁻¹_kj, with ∂σ⁻¹
        // computed by differencing the inverse directly.
        let sigma =
            |x: &[f64]| DMatrix::from_row_slice(2, 2, &[2.0 + x[0].sin(), 0.1 * x[1], 0.2 * x[0], 1.0 + x[1] * x[1]]);
        let model = DiffusionModel::new(2, sigma, |x| vec![1.0 + x[1], x[0] * x[0]]).unwrap();
        let x = [0.4, -0.3];
        let s = sigma(&x);
        let inv = |p: &[f64]| sigma(p).try_inverse().unwrap();
        let h = 1e-6;
        let dinv: Vec<DMatrix<f64>> = (0..2)
            .map(|m| {
                let mut xp = x;
                let mut xm = x;
                xp[m] += h;
                xm[m] -= h;
                (inv(&xp) - inv(&xm)) / (2.0 * h)
            })
            .collect();
        let b = model.drift(&x);
        let si = inv(&x);
        let mut expect = vec![0.0; 2];
        for k in 0..2 {
            for j in 0..2 {
                expect[k] += si[(k, j)] * b[j];
                for l in 0..2 {
                    let dy = (0..2).map(|m| s[(m, l)] * dinv[m][(k, j)]).sum::<f64>();
                    expect[k] += 0.5 * s[(j, l)] * dy;
                }
            }
        }
        let got = induced_drift(&model, &x).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        }
    }

    #[test]
    fn singular_sigma_is_reported_with_point() {
        let model = DiffusionModel::gbm(1.0, 1.0);
        match induced_drift(&model, &[0.0]) {
            Err(Error::Singularity { point, .. }) => assert_eq!(point, vec![0.0]),
            other => panic!("expected singularity, got {other:?}"),
        }
    }

    #[test]
    fn missing_derivatives_is_a_capability_error() {
        let model = DiffusionModel::scalar(|x| 1.0 + x * x, |_| 0.0).with_finite_differences(None);
        assert!(matches!(induced_drift(&model, &[0.5]), Err(Error::Capability(_))));
    }

    #[test]
    fn lamperti_map_examples() {
        let unit = DiffusionModel::constant(0.0, 1.0);
        assert_abs_diff_eq!(lamperti_map_1d(&unit, 3.0, 0.0).unwrap(), 3.0, epsilon = 1e-12);
        assert_eq!(lamperti_map_1d(&unit, 0.4, 0.4).unwrap(), 0.0);
        let gbm = DiffusionModel::gbm(0.0, 1.0);
        assert_abs_diff_eq!(
            lamperti_map_1d(&gbm, std::f64::consts::E, 1.0).unwrap(),
            1.0,
            epsilon = 1e-10
        );
        assert!(matches!(
            lamperti_map_1d(&gbm, 1.0, -1.0),
            Err(Error::Singularity { .. })
        ));
    }

    #[test]
    fn operator_examples() {
        let square = TestFunction::new(|x| x[0] * x[0]);
        let heat = DiffusionModel::constant(0.0, 1.0);
        let v = apply_operator(&heat, &square, &[0.7], OperatorMode::Generator).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-6);
        let v0 = apply_operator(&heat, &square, &[0.0], OperatorMode::Generator).unwrap();
        assert_abs_diff_eq!(v0, 1.0, epsilon = 1e-6);
        let drifted = DiffusionModel::constant(1.0, 1.0);
        let adj = apply_operator(&drifted, &square, &[1.0], OperatorMode::Adjoint).unwrap();
        assert_abs_diff_eq!(adj, -1.0, epsilon = 1e-6);
    }

    #[test]
    fn constant_potential_shifts_by_c_times_f() {
        let f = TestFunction::new(|x| (x[0]).sin() + 2.0);
        let base = DiffusionModel::cir_like(0.5, 1.0, 0.3);
        let shifted = base.clone().with_potential(|_| 1.25);
        for mode in [OperatorMode::Generator, OperatorMode::Adjoint] {
            let a = apply_operator(&base, &f, &[0.8], mode).unwrap();
            let b = apply_operator(&shifted, &f, &[0.8], mode).unwrap();
            assert_abs_diff_eq!(b - a, 1.25 * f.value(&[0.8]), epsilon = 1e-9);
        }
    }

    #[test]
    fn adjoint_is_formal_adjoint() {
        // ∫ φ L ψ = ∫ ψ L† φ for rapidly decaying φ, ψ (trapezoid on [-8, 8]).
        let model =
            DiffusionModel::scalar(|x| 1.0 + 0.3 * x.sin(), |x| 0.5 - 0.2 * x).with_potential(|x| -0.1 * x[0] * x[0]);
        let phi = TestFunction::new(|x| (-x[0] * x[0]).exp());
        let psi = TestFunction::new(|x| (-(x[0] - 0.5).powi(2)).exp() * (1.0 + x[0]));
        let n = 1600;
        let h = 16.0 / n as f64;
        let (mut lhs, mut rhs) = (0.0, 0.0);
        for i in 1..n {
            let x = [-8.0 + i as f64 * h];
            lhs += phi.value(&x) * apply_operator(&model, &psi, &x, OperatorMode::Generator).unwrap() * h;
            rhs += psi.value(&x) * apply_operator(&model, &phi, &x, OperatorMode::Adjoint).unwrap() * h;
        }
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-6);
    }

    #[test]
    fn chain_rule_through_gbm_frame() {
        // σ = s x, y = ln(x)/s, x(y) = e^{sy}; f = x², F(y) = e^{2sy}.
        let (mu, s) = (0.7, 0.4);
        let model = DiffusionModel::gbm(mu, s).with_potential(|x| 0.3 * x[0]);
        let square = TestFunction::new(|x| x[0] * x[0])
            .with_derivatives(|x| vec![2.0 * x[0]], |_| DMatrix::from_element(1, 1, 2.0));
        let frame = TransformedModel::from_1d(model.clone(), 1.0, (1e-6, 1e6)).unwrap();
        let unit = frame.unit_diffusion_model();
        let lifted = TestFunction::new(move |y| (2.0 * s * y[0]).exp()).with_derivatives(
            move |y| vec![2.0 * s * (2.0 * s * y[0]).exp()],
            move |y| DMatrix::from_element(1, 1, 4.0 * s * s * (2.0 * s * y[0]).exp()),
        );
        for x in [0.5, 1.0, 2.3] {
            let y = frame.to_y(&[x]).unwrap();
            assert_abs_diff_eq!(y[0], x.ln() / s, epsilon = 1e-9);
            let back = frame.to_x(&y).unwrap();
            assert_abs_diff_eq!(back[0], x, epsilon = 1e-9);
            let lhs = apply_operator(&model, &square, &[x], OperatorMode::Generator).unwrap();
            let rhs = apply_operator(&unit, &lifted, &y, OperatorMode::Generator).unwrap();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-5);
        }
    }
}

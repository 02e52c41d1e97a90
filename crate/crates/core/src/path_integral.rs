//! Principal eigenfunctions by quadrature along trajectories.
//!
//! For `φ(x) = wᵀx + h(x)` the nonlinear part satisfies, along the flow,
//!
//! ```text
//! h(x) = e^{-λt} h(s_t(x)) + ∫₀ᵗ e^{-λτ} wᵀ f_n(s_τ(x)) dτ.
//! ```
//!
//! For stable systems (under the spectral condition) the boundary term vanishes
//! as `t → ∞`. For saddles the integral is stopped on a boundary set where an
//! estimate `ĥ` of `h` is known, and the error there is propagated with the
//! factor `e^{-Re(λ) t̄}`.
//!
//! The integral is accumulated as two extra ODE components integrated jointly
//! with the state, so the step-size controller sees the quadrature error.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    integrate, norm, outward_guard, IntegratorSettings, LinearDecomposition, StepControl, StopReason,
};
use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::spectral::{classify_equilibrium, spectral_condition, spectrum, EquilibriumKind, PrincipalEigenpair};

pub type BoundaryFn = Arc<dyn Fn(&[f64]) -> C64 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    /// `ĥ ≡ 0` on and outside the sphere; used with the linearized-exterior transform.
    ZeroOnSphere,
    /// `ĥ` fitted on the sphere, e.g. from local EDMD.
    Fitted,
}

/// Terminal condition for the finite-horizon path integral: a sphere of
/// radius `radius` on which `h ≈ ĥ` with tolerance `eps_s`.
#[derive(Clone)]
pub struct BoundaryCondition {
    kind: BoundaryKind,
    radius: f64,
    h_hat: BoundaryFn,
    eps_s: Option<f64>,
}

impl fmt::Debug for BoundaryCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoundaryCondition")
            .field("kind", &self.kind)
            .field("radius", &self.radius)
            .field("eps_s", &self.eps_s)
            .finish()
    }
}

impl BoundaryCondition {
    pub fn zero_on_sphere(radius: f64, eps_s: f64) -> Self {
        Self {
            kind: BoundaryKind::ZeroOnSphere,
            radius,
            h_hat: Arc::new(|_| C64::new(0.0, 0.0)),
            eps_s: Some(eps_s),
        }
    }

    pub fn fitted<F>(radius: f64, h_hat: F, eps_s: Option<f64>) -> Self
    where
        F: Fn(&[f64]) -> C64 + Send + Sync + 'static,
    {
        Self {
            kind: BoundaryKind::Fitted,
            radius,
            h_hat: Arc::new(h_hat),
            eps_s,
        }
    }

    pub fn kind(&self) -> BoundaryKind {
        self.kind
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn eps_s(&self) -> Option<f64> {
        self.eps_s
    }

    pub fn with_eps_s(mut self, eps_s: Option<f64>) -> Self {
        self.eps_s = eps_s;
        self
    }

    pub fn h_hat(&self, x: &[f64]) -> C64 {
        (self.h_hat)(x)
    }

    /// Boundary with `ĥ` and `eps_s` multiplied by `c` (gauge change `w → c·w`).
    pub fn scaled(&self, c: C64) -> Self {
        let inner = self.h_hat.clone();
        Self {
            kind: self.kind,
            radius: self.radius,
            h_hat: Arc::new(move |x| inner(x) * c),
            eps_s: self.eps_s.map(|e| e * c.norm()),
        }
    }

    /// Whether `x` already lies in the boundary set.
    ///
    /// A fitted boundary is the sphere itself; a zero boundary also covers the
    /// exterior, where the transformed field is linear and `ĥ ≈ 0` still holds.
    pub fn contains(&self, x: &[f64]) -> bool {
        let r = norm(x);
        let tol = 1e-12 * self.radius.max(1.0);
        match self.kind {
            BoundaryKind::Fitted => (r - self.radius).abs() <= tol,
            BoundaryKind::ZeroOnSphere => r >= self.radius - tol,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Converged,
    BoundaryHit,
    MaxTime,
    Failed,
}

impl fmt::Display for SampleStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Converged => "converged",
            Self::BoundaryHit => "boundary_hit",
            Self::MaxTime => "max_time",
            Self::Failed => "failed",
        })
    }
}

impl FromStr for SampleStatus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "converged" => Self::Converged,
            "boundary_hit" => Self::BoundaryHit,
            "max_time" => Self::MaxTime,
            "failed" => Self::Failed,
            other => return Err(Error::InvalidInput(format!("unknown sample status `{other}`"))),
        })
    }
}

/// One evaluated point: `phi = wᵀ·point + h`.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenfunctionSample {
    pub point: Vec<f64>,
    pub phi: C64,
    pub h: C64,
    /// Integration horizon: convergence time or boundary hitting time.
    pub exit_time: f64,
    pub error_bound: Option<f64>,
    pub status: SampleStatus,
    pub message: Option<String>,
}

impl EigenfunctionSample {
    fn new(pair: &PrincipalEigenpair, point: &[f64], h: C64, exit_time: f64, error_bound: Option<f64>, status: SampleStatus) -> Self {
        let phi = pair.project(point) + h;
        if pair.is_real() {
            debug_assert!(phi.im.abs() < 1e-10, "real eigenpair produced complex value {phi}");
        }
        Self {
            point: point.to_vec(),
            phi,
            h,
            exit_time,
            error_bound,
            status,
            message: None,
        }
    }

    fn failure(point: &[f64], status: SampleStatus, err: &Error) -> Self {
        let nan = C64::new(f64::NAN, f64::NAN);
        Self {
            point: point.to_vec(),
            phi: nan,
            h: nan,
            exit_time: f64::NAN,
            error_bound: None,
            status,
            message: Some(err.to_string()),
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self.status, SampleStatus::Converged | SampleStatus::BoundaryHit)
    }
}

/// Controls for a path-integral evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathIntegralSettings {
    pub integrator: IntegratorSettings,
    pub t_max: f64,
    /// Trailing window (time units) for the infinite-horizon stopping rule.
    pub window: f64,
    /// Increment over the window below which the infinite integral is converged.
    pub converge_tol: f64,
    /// Skip the spectral-condition precondition of the infinite-horizon formula.
    pub force: bool,
}

impl Default for PathIntegralSettings {
    fn default() -> Self {
        Self {
            integrator: IntegratorSettings::default(),
            t_max: 100.0,
            window: 1.0,
            converge_tol: 1e-8,
            force: false,
        }
    }
}

fn is_origin(x: &[f64]) -> bool {
    x.iter().all(|v| *v == 0.0)
}

fn check_dims(dec: &LinearDecomposition, pair: &PrincipalEigenpair, x: &[f64]) -> Result<()> {
    let n = dec.dim();
    if pair.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: pair.dim() });
    }
    if x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x.len() });
    }
    Ok(())
}

/// Right-hand side of the state augmented with `I' = e^{-λt} wᵀ f_n(x)`.
fn augmented_rhs<'a>(
    dec: &'a LinearDecomposition,
    pair: &'a PrincipalEigenpair,
) -> impl Fn(f64, &[f64], &mut [f64]) + 'a {
    let n = dec.dim();
    let a = dec.a();
    let field = dec.field();
    move |t, y, dy| {
        let x = &y[..n];
        field.eval_into(x, &mut dy[..n]);
        let mut proj = C64::new(0.0, 0.0);
        for i in 0..n {
            let mut ax = 0.0;
            for j in 0..n {
                ax += a[(i, j)] * x[j];
            }
            proj += pair.w[i] * (dy[i] - ax);
        }
        let v = (-pair.lambda * t).exp() * proj;
        dy[n] = v.re;
        dy[n + 1] = v.im;
    }
}

fn augmented_start(x: &[f64]) -> Vec<f64> {
    let mut y0 = x.to_vec();
    y0.extend_from_slice(&[0.0, 0.0]);
    y0
}

/// Infinite-horizon path integral for a stable equilibrium.
///
/// Stops once the accumulated integral changes by less than
/// `settings.converge_tol` over the trailing `settings.window`.
pub fn eigenfunction_infinite(
    dec: &LinearDecomposition,
    pair: &PrincipalEigenpair,
    x: &[f64],
    settings: &PathIntegralSettings,
) -> Result<EigenfunctionSample> {
    check_dims(dec, pair, x)?;
    if !settings.force && !spectral_condition(pair.lambda, &spectrum(dec.a()))? {
        return Err(Error::SpectralConditionViolated { lambda: pair.lambda });
    }
    if is_origin(x) {
        return Ok(EigenfunctionSample::new(pair, x, C64::new(0.0, 0.0), 0.0, None, SampleStatus::Converged));
    }
    let n = dec.dim();
    let rhs = augmented_rhs(dec, pair);
    let mut history: VecDeque<(f64, C64)> = VecDeque::new();
    let window = settings.window;
    let tol = settings.converge_tol;
    let out = integrate(&rhs, n, &augmented_start(x), settings.t_max, None, &settings.integrator, |t, y| {
        let acc = C64::new(y[n], y[n + 1]);
        history.push_back((t, acc));
        while history.len() >= 2 && history[1].0 <= t - window {
            history.pop_front();
        }
        match history.front() {
            Some(&(t0, i0)) if t0 <= t - window && (acc - i0).norm() < tol => StepControl::Stop,
            _ => StepControl::Continue,
        }
    })?;
    if out.reason != StopReason::Observer {
        return Err(Error::NoConvergence { t_max: settings.t_max });
    }
    let h = C64::new(out.y[n], out.y[n + 1]);
    Ok(EigenfunctionSample::new(pair, x, h, out.t, None, SampleStatus::Converged))
}

/// Finite-horizon path integral terminated at the first crossing of the boundary sphere.
///
/// `h = e^{-λt̄} ĥ(s_t̄(x)) + ∫₀^t̄ e^{-λτ} wᵀ f_n(s_τ(x)) dτ`, with error
/// bound `eps_s · e^{-Re(λ) t̄}` when `eps_s` is known.
pub fn eigenfunction_finite(
    dec: &LinearDecomposition,
    pair: &PrincipalEigenpair,
    x: &[f64],
    bc: &BoundaryCondition,
    settings: &PathIntegralSettings,
) -> Result<EigenfunctionSample> {
    check_dims(dec, pair, x)?;
    if is_origin(x) {
        return Ok(EigenfunctionSample::new(pair, x, C64::new(0.0, 0.0), 0.0, Some(0.0), SampleStatus::Converged));
    }
    if bc.contains(x) {
        return Ok(EigenfunctionSample::new(pair, x, bc.h_hat(x), 0.0, bc.eps_s(), SampleStatus::BoundaryHit));
    }
    outward_guard(dec.field(), x, bc.radius())?;
    let n = dec.dim();
    let rhs = augmented_rhs(dec, pair);
    let out = integrate(
        &rhs,
        n,
        &augmented_start(x),
        settings.t_max,
        Some(bc.radius()),
        &settings.integrator,
        |_, _| StepControl::Continue,
    )?;
    if out.reason != StopReason::Event {
        return Err(Error::BoundaryNotReached { t_max: settings.t_max });
    }
    let t_bar = out.t;
    let integral = C64::new(out.y[n], out.y[n + 1]);
    let h = (-pair.lambda * t_bar).exp() * bc.h_hat(&out.y[..n]) + integral;
    let bound = bc.eps_s().map(|e| e * (-pair.lambda.re * t_bar).exp());
    Ok(EigenfunctionSample::new(pair, x, h, t_bar, bound, SampleStatus::BoundaryHit))
}

/// Stable eigenfunction of a saddle: the finite-horizon integral of the
/// reversed field with eigenpair `(-λ, w)`. `exit_time` is the backward hitting time.
pub fn stable_saddle_eigenfunction(
    dec: &LinearDecomposition,
    pair: &PrincipalEigenpair,
    x: &[f64],
    bc: &BoundaryCondition,
    settings: &PathIntegralSettings,
) -> Result<EigenfunctionSample> {
    if !(pair.lambda.re < 0.0) {
        return Err(Error::InvalidInput(format!("stable saddle eigenfunction needs Re(λ) < 0, got {}", pair.lambda)));
    }
    if classify_equilibrium(dec.a()).kind != EquilibriumKind::Saddle {
        return Err(Error::InvalidInput("equilibrium is not a saddle".into()));
    }
    eigenfunction_finite(&dec.reversed(), &pair.negated(), x, bc, settings)
}

/// How each grid node is evaluated.
#[derive(Clone, Debug)]
pub enum Method {
    Infinite,
    /// Forward finite horizon (unstable directions).
    Finite(BoundaryCondition),
    /// Backward finite horizon (stable directions of a saddle).
    StableSaddle(BoundaryCondition),
}

impl Method {
    /// Forward for `Re(λ) ≥ 0`, backward otherwise.
    pub fn finite_for(pair: &PrincipalEigenpair, bc: BoundaryCondition) -> Self {
        if pair.lambda.re < 0.0 {
            Self::StableSaddle(bc)
        } else {
            Self::Finite(bc)
        }
    }
}

pub fn evaluate_point(
    dec: &LinearDecomposition,
    pair: &PrincipalEigenpair,
    x: &[f64],
    method: &Method,
    settings: &PathIntegralSettings,
) -> Result<EigenfunctionSample> {
    match method {
        Method::Infinite => eigenfunction_infinite(dec, pair, x, settings),
        Method::Finite(bc) => eigenfunction_finite(dec, pair, x, bc, settings),
        Method::StableSaddle(bc) => stable_saddle_eigenfunction(dec, pair, x, bc, settings),
    }
}

/// One axis of a rectangular grid: `count` points from `lo` to `hi` inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, count: usize) -> Self {
        Self { lo, hi, count }
    }

    pub fn spacing(&self) -> f64 {
        if self.count > 1 {
            (self.hi - self.lo) / (self.count - 1) as f64
        } else {
            0.0
        }
    }

    pub fn value(&self, i: usize) -> f64 {
        if self.count == 1 {
            self.lo
        } else if i + 1 == self.count {
            self.hi
        } else {
            self.lo + i as f64 * self.spacing()
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.value(i)).collect()
    }
}

impl FromStr for Axis {
    type Err = Error;

    /// `lo:hi:count`, e.g. `-2:2:41`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::InvalidInput(format!("axis `{s}` must be lo:hi:count"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if count == 0 || !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(bad());
        }
        Ok(Self { lo, hi, count })
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.lo, self.hi, self.count)
    }
}

/// Axis-aligned rectangular grid. Nodes are row-major: the last axis varies fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
}

impl GridSpec {
    pub fn new(axes: Vec<Axis>) -> Self {
        Self { axes }
    }

    /// Square grid `[lo, hi]^dim` with `count` points per axis.
    pub fn square(dim: usize, lo: f64, hi: f64, count: usize) -> Self {
        Self { axes: vec![Axis::new(lo, hi, count); dim] }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            idx[k] = flat % self.axes[k].count;
            flat /= self.axes[k].count;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.axes).fold(0, |acc, (i, a)| acc * a.count + i)
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.value(i))
            .collect()
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    /// Comma-separated axes, e.g. `-2:2:41,-2:2:41`.
    fn from_str(s: &str) -> Result<Self> {
        let axes = s.split(',').map(str::parse).collect::<Result<Vec<Axis>>>()?;
        Ok(Self { axes })
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.axes.iter().map(Axis::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Evaluates every grid node independently (in parallel). Node failures are
/// recorded in the sample status; the result order is the grid order.
pub fn evaluate_grid(
    dec: &LinearDecomposition,
    pair: &PrincipalEigenpair,
    grid: &GridSpec,
    method: &Method,
    settings: &PathIntegralSettings,
) -> Result<Vec<EigenfunctionSample>> {
    if grid.dim() != dec.dim() {
        return Err(Error::DimensionMismatch { expected: dec.dim(), got: grid.dim() });
    }
    Ok((0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.node(i);
            match evaluate_point(dec, pair, &x, method, settings) {
                Ok(s) => s,
                Err(e @ (Error::BoundaryNotReached { .. } | Error::NoConvergence { .. })) => {
                    EigenfunctionSample::failure(&x, SampleStatus::MaxTime, &e)
                }
                Err(e) => EigenfunctionSample::failure(&x, SampleStatus::Failed, &e),
            }
        })
        .collect())
}

/// Outcome of the finite-difference check `|∇φ·f − λφ| ≤ tol·(1 + |φ|)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeResidualReport {
    pub checked: usize,
    pub passed: usize,
    pub max_scaled_residual: f64,
}

impl PdeResidualReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Scaled centered-difference residual `|∇φ·f − λφ| / (1 + |φ|)` at every
/// interior node, as `(flat index, residual)`; `None` when the stencil holds a
/// failed sample.
pub fn pde_residuals(
    field: &crate::dynamics::VectorField,
    lambda: C64,
    grid: &GridSpec,
    samples: &[EigenfunctionSample],
) -> Vec<(usize, Option<f64>)> {
    let n = grid.dim();
    let mut out = Vec::new();
    for flat in 0..grid.len() {
        let idx = grid.multi_index(flat);
        if idx.iter().zip(&grid.axes).any(|(&i, a)| i == 0 || i + 1 >= a.count) {
            continue;
        }
        let centre = &samples[flat];
        let fx = field.eval(&centre.point);
        let mut grad_f = C64::new(0.0, 0.0);
        let mut ok = centre.is_ok();
        for k in 0..n {
            let mut up = idx.clone();
            up[k] += 1;
            let mut dn = idx.clone();
            dn[k] -= 1;
            let (su, sd) = (&samples[grid.flat_index(&up)], &samples[grid.flat_index(&dn)]);
            ok &= su.is_ok() && sd.is_ok();
            let h = su.point[k] - sd.point[k];
            grad_f += (su.phi - sd.phi) / h * fx[k];
        }
        let scaled = ok.then(|| (grad_f - lambda * centre.phi).norm() / (1.0 + centre.phi.norm()));
        out.push((flat, scaled));
    }
    out
}

/// Counts interior nodes passing `|∇φ·f − λφ| ≤ tol·(1 + |φ|)`.
///
/// Nodes whose stencil contains a failed sample count as failures.
pub fn pde_residual(
    field: &crate::dynamics::VectorField,
    lambda: C64,
    grid: &GridSpec,
    samples: &[EigenfunctionSample],
    tol: f64,
) -> PdeResidualReport {
    let all = pde_residuals(field, lambda, grid, samples);
    let ok = all.iter().filter_map(|(_, r)| *r);
    PdeResidualReport {
        checked: all.len(),
        passed: ok.clone().filter(|&r| r <= tol).count(),
        max_scaled_residual: ok.fold(0.0, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{decompose, VectorField};
    use nalgebra::DMatrix;

    fn system_c() -> LinearDecomposition {
        decompose(&VectorField::new(2, |x, out| {
            out[0] = -x[0] + x[1] * x[1];
            out[1] = -2.0 * x[1];
        }))
        .unwrap()
    }

    fn pair_c() -> PrincipalEigenpair {
        PrincipalEigenpair::real(-1.0, &[1.0, 0.0])
    }

    fn tight() -> PathIntegralSettings {
        PathIntegralSettings {
            integrator: IntegratorSettings { rel_tol: 1e-11, abs_tol: 1e-13, ..Default::default() },
            converge_tol: 1e-11,
            ..Default::default()
        }
    }

    #[test]
    fn infinite_closed_form_on_system_c() {
        let s = eigenfunction_infinite(&system_c(), &pair_c(), &[0.0, 1.0], &tight()).unwrap();
        assert!((s.h.re - 1.0 / 3.0).abs() < 1e-8, "{}", s.h);
        assert!((s.phi.re - 1.0 / 3.0).abs() < 1e-8);
        assert_eq!(s.phi.im, 0.0);
        assert_eq!(s.status, SampleStatus::Converged);

        let s = eigenfunction_infinite(&system_c(), &pair_c(), &[1.0, 0.0], &tight()).unwrap();
        assert!(s.h.norm() < 1e-12);
        assert!((s.phi.re - 1.0).abs() < 1e-12);

        let s = eigenfunction_infinite(&system_c(), &pair_c(), &[0.0, 0.0], &tight()).unwrap();
        assert_eq!(s.phi, C64::new(0.0, 0.0));
    }

    #[test]
    fn infinite_rejects_violated_spectral_condition() {
        let pair = PrincipalEigenpair::real(-2.0, &[0.0, 1.0]);
        let err = eigenfunction_infinite(&system_c(), &pair, &[0.5, 0.5], &Default::default()).unwrap_err();
        assert!(matches!(err, Error::SpectralConditionViolated { .. }));
        let forced = PathIntegralSettings { force: true, ..Default::default() };
        // f_n has no x2-component, so h ≡ 0 and φ = x2 whatever the condition says.
        let s = eigenfunction_infinite(&system_c(), &pair, &[0.5, 0.5], &forced).unwrap();
        assert!((s.phi.re - 0.5).abs() < 1e-9);
    }

    #[test]
    fn infinite_reports_no_convergence() {
        let settings = PathIntegralSettings { t_max: 0.5, ..Default::default() };
        let err = eigenfunction_infinite(&system_c(), &pair_c(), &[0.0, 1.0], &settings).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { .. }));
    }

    #[test]
    fn boundary_point_uses_fitted_value() {
        let bc = BoundaryCondition::fitted(2.0, |x| C64::new(x[1] * x[1] / 3.0, 0.0), Some(0.05));
        let x = [0.0, 2.0];
        let s = eigenfunction_finite(&system_c(), &pair_c(), &x, &bc, &Default::default()).unwrap();
        assert_eq!(s.exit_time, 0.0);
        assert!((s.h.re - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.error_bound, Some(0.05));
    }

    #[test]
    fn error_bound_is_eps_times_decay() {
        // Scalar x' = 2.5x: f_n = 0, t̄ = ln(R/x0) = 1 for x0 = R/e.
        let dec = decompose(&VectorField::new(1, |x, out| out[0] = 2.5 * x[0])).unwrap();
        let pair = PrincipalEigenpair::real(2.5, &[1.0]);
        let r = 3.0;
        let bc = BoundaryCondition::fitted(r, |_| C64::new(0.0, 0.0), Some(0.05));
        let x0 = r * (-2.5f64).exp();
        let s = eigenfunction_finite(&dec, &pair, &[x0], &bc, &Default::default()).unwrap();
        assert!((s.exit_time - 1.0).abs() < 1e-8);
        assert!((s.error_bound.unwrap() - 0.05 * (-2.5f64).exp()).abs() < 1e-9);
        assert!((s.error_bound.unwrap() - 0.004104).abs() < 1e-6);
    }

    #[test]
    fn finite_agrees_with_infinite_on_system_c() {
        let dec = system_c();
        let pair = pair_c();
        let settings = tight();
        // Exact h on the sphere makes the finite-horizon formula exact.
        let bc = BoundaryCondition::fitted(2.0, |x| C64::new(x[1] * x[1] / 3.0, 0.0), Some(0.0));
        let rev_bc = bc.clone();
        for &x in &[[0.5, 0.5], [-1.0, 1.0], [1.0, -1.0], [-0.3, 0.9], [0.0, -1.0]] {
            let inf = eigenfunction_infinite(&dec, &pair, &x, &settings).unwrap();
            // Stable system: the sphere is reached backward in time.
            let fin = eigenfunction_finite(&dec.reversed(), &pair.negated(), &x, &rev_bc, &settings).unwrap();
            assert!((inf.phi - fin.phi).norm() < 1e-6, "{x:?}: {} vs {}", inf.phi, fin.phi);
        }
    }

    #[test]
    fn gauge_scaling_is_linear() {
        let dec = decompose(&VectorField::new(2, |x, out| {
            out[0] = x[0] + x[1] * x[1];
            out[1] = -x[1];
        }))
        .unwrap();
        let pair = PrincipalEigenpair::real(1.0, &[1.0, 0.0]);
        let bc = BoundaryCondition::fitted(2.0, |x| C64::new(x[1] * x[1] / 3.0, 0.0), Some(0.01));
        let c = C64::new(-2.5, 0.0);
        let x = [0.3, 0.4];
        let s1 = eigenfunction_finite(&dec, &pair, &x, &bc, &Default::default()).unwrap();
        let s2 = eigenfunction_finite(&dec, &pair.scaled(c), &x, &bc.scaled(c), &Default::default()).unwrap();
        let gap = (s2.phi - s1.phi * c).norm();
        // Step sequences differ because the quadrature enters error control.
        assert!(gap < 1e-8 * (1.0 + s1.phi.norm()), "gap {gap}");
    }

    #[test]
    fn unreached_boundary_is_reported() {
        let dec = system_c();
        let bc = BoundaryCondition::fitted(5.0, |_| C64::new(0.0, 0.0), None);
        let settings = PathIntegralSettings { t_max: 5.0, ..Default::default() };
        let pair = PrincipalEigenpair::real(1.0, &[1.0, 0.0]);
        let err = eigenfunction_finite(&dec, &pair, &[0.5, 0.5], &bc, &settings).unwrap_err();
        assert!(matches!(err, Error::BoundaryNotReached { .. }));
    }

    #[test]
    fn linear_grid_has_zero_nonlinear_part() {
        let dec = decompose(&VectorField::linear(DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -3.0]))).unwrap();
        let pair = PrincipalEigenpair::real(-1.0, &[1.0, 0.0]);
        let grid = GridSpec::square(2, 0.0, 1.0, 2);
        let out = evaluate_grid(&dec, &pair, &grid, &Method::Infinite, &Default::default()).unwrap();
        assert_eq!(out.len(), 4);
        for s in &out {
            assert!(s.h.norm() < 1e-14);
            assert!((s.phi.re - s.point[0]).abs() < 1e-14);
        }
        assert_eq!(out[0].phi, C64::new(0.0, 0.0));
    }

    #[test]
    fn grid_order_is_row_major() {
        let grid: GridSpec = "-1:1:3,0:1:2".parse().unwrap();
        let nodes = grid.nodes();
        assert_eq!(nodes[0], vec![-1.0, 0.0]);
        assert_eq!(nodes[1], vec![-1.0, 1.0]);
        assert_eq!(nodes[2], vec![0.0, 0.0]);
        assert_eq!(nodes[5], vec![1.0, 1.0]);
        assert_eq!(grid.flat_index(&[1, 1]), 3);
        assert!("1:0:3".parse::<GridSpec>().is_err());
        assert!("1:2".parse::<GridSpec>().is_err());
    }

    #[test]
    fn grid_failures_do_not_abort() {
        let dec = system_c();
        let pair = PrincipalEigenpair::real(1.0, &[1.0, 0.0]);
        let bc = BoundaryCondition::fitted(5.0, |_| C64::new(0.0, 0.0), None);
        let settings = PathIntegralSettings { t_max: 2.0, ..Default::default() };
        let out = evaluate_grid(&dec, &pair, &GridSpec::square(2, -1.0, 1.0, 3), &Method::Finite(bc), &settings).unwrap();
        assert_eq!(out.len(), 9);
        assert!(out.iter().filter(|s| s.point != vec![0.0, 0.0]).all(|s| s.status == SampleStatus::MaxTime));
        assert!(out[4].is_ok());
    }
}

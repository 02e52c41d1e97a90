//! Shipped example systems with closed-form ground truth, and the
//! zero-level-set controller extraction for the optimal-control example.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::VectorField;
use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::path_integral::EigenfunctionSample;
use crate::spectral::PrincipalEigenpair;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type ControllerFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Names accepted by [`by_name`].
pub const CASE_NAMES: [&str; 3] = ["example-a", "example-b", "test-c"];

/// Closed-form eigenfunction with its gradient.
#[derive(Clone)]
pub struct AnalyticEigenpair {
    pub lambda: f64,
    pub phi: ScalarFn,
    pub grad: GradientFn,
}

impl fmt::Debug for AnalyticEigenpair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalyticEigenpair").field("lambda", &self.lambda).finish_non_exhaustive()
    }
}

impl AnalyticEigenpair {
    fn new<P, G>(lambda: f64, phi: P, grad: G) -> Self
    where
        P: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self { lambda, phi: Arc::new(phi), grad: Arc::new(grad) }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.phi)(x)
    }

    /// `|∇φ·f − λφ|` at `x`.
    pub fn pde_residual(&self, f: &VectorField, x: &[f64]) -> f64 {
        let g = (self.grad)(x);
        let fx = f.eval(x);
        (g.iter().zip(&fx).map(|(a, b)| a * b).sum::<f64>() - self.lambda * self.eval(x)).abs()
    }

    /// Scalar `c` with `c·∇φ(0)` closest to `w` in least squares, so that
    /// `c·φ` is in the gauge of `w`.
    pub fn gauge_to(&self, pair: &PrincipalEigenpair) -> C64 {
        let l = (self.grad)(&vec![0.0; pair.dim()]);
        let num: C64 = pair.w.iter().zip(&l).map(|(w, v)| w * v).sum();
        num / l.iter().map(|v| v * v).sum::<f64>()
    }
}

/// A named example system.
#[derive(Clone)]
pub struct CaseStudy {
    pub name: String,
    pub field: VectorField,
    pub analytic_eigenpairs: Vec<AnalyticEigenpair>,
    pub analytic_controller: Option<ControllerFn>,
}

impl fmt::Debug for CaseStudy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CaseStudy")
            .field("name", &self.name)
            .field("dim", &self.field.dim())
            .field("analytic_eigenpairs", &self.analytic_eigenpairs)
            .field("analytic_controller", &self.analytic_controller.is_some())
            .finish()
    }
}

impl CaseStudy {
    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    /// Analytic eigenpair with eigenvalue within `1e-9` of `lambda`.
    pub fn analytic_for(&self, lambda: C64) -> Option<&AnalyticEigenpair> {
        self.analytic_eigenpairs
            .iter()
            .find(|p| (C64::new(p.lambda, 0.0) - lambda).norm() < 1e-9)
    }

    /// Largest analytic PDE residual over `count` seeded points of `[−2, 2]^n`.
    pub fn max_pde_residual(&self, count: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..self.dim()).map(|_| rng.random_range(-2.0..=2.0)).collect())
            .collect();
        self.analytic_eigenpairs
            .iter()
            .flat_map(|p| pts.iter().map(move |x| p.pde_residual(&self.field, x)))
            .fold(0.0, f64::max)
    }
}

/// Common denominator of the first example's field; at least 1 everywhere.
pub fn example_a_denominator(x1: f64, x2: f64) -> f64 {
    9.0 * x1 * x1 * x2 * x2 + 6.0 * x1 * x1 + 3.0 * x2 * x2 + x2.cos() + 2.0
}

/// Planar saddle with `λ₁ = −1`, `φ₁ = x1 − 2x2 − x2³` and
/// `λ₂ = 2.5`, `φ₂ = x1 + sin x2 + x1³`.
pub fn example_a() -> CaseStudy {
    let field = VectorField::new(2, |x, o| {
        let (x1, x2) = (x[0], x[1]);
        let d = example_a_denominator(x1, x2);
        let p = -x1 + x2.powi(3) + 2.0 * x2;
        let q = x1.powi(3) + x1 + x2.sin();
        o[0] = ((7.5 * x2 * x2 + 5.0) * q + p * x2.cos()) / d;
        o[1] = (2.5 * x1.powi(3) + 2.5 * x1 - (3.0 * x1 * x1 + 1.0) * p + 2.5 * x2.sin()) / d;
    });
    CaseStudy {
        name: "example-a".into(),
        field,
        analytic_eigenpairs: vec![
            AnalyticEigenpair::new(
                -1.0,
                |x| x[0] - 2.0 * x[1] - x[1].powi(3),
                |x| vec![1.0, -2.0 - 3.0 * x[1] * x[1]],
            ),
            AnalyticEigenpair::new(
                2.5,
                |x| x[0] + x[1].sin() + x[0].powi(3),
                |x| vec![1.0 + 3.0 * x[0] * x[0], x[1].cos()],
            ),
        ],
        analytic_controller: None,
    }
}

/// `u*(x1) = x1³ − x1·sqrt(1 + x1⁴)` for `min ∫ x1² + u²` with `x1' = −x1³ + u`.
pub fn example_b_controller(x1: f64) -> f64 {
    x1.powi(3) - x1 * (1.0 + x1.powi(4)).sqrt()
}

/// Hamiltonian system of the scalar optimal-control problem
/// `min ∫ x1² + u² dt`, `x1' = −x1³ + u`, with co-state `x2` and `u* = −x2/2`.
pub fn example_b() -> CaseStudy {
    let field = VectorField::new(2, |x, o| {
        o[0] = -x[0].powi(3) - 0.5 * x[1];
        o[1] = -2.0 * x[0] + 3.0 * x[0] * x[0] * x[1];
    })
    .with_jacobian(|x| {
        DMatrix::from_row_slice(2, 2, &[-3.0 * x[0] * x[0], -0.5, -2.0 + 6.0 * x[0] * x[1], 3.0 * x[0] * x[0]])
    });
    CaseStudy {
        name: "example-b".into(),
        field,
        analytic_eigenpairs: Vec::new(),
        analytic_controller: Some(Arc::new(example_b_controller)),
    }
}

/// Stable system `(−x1 + x2², −2x2)` with `φ = x1 + x2²/3`, `λ = −1`.
pub fn test_system_c() -> CaseStudy {
    let field = VectorField::new(2, |x, o| {
        o[0] = -x[0] + x[1] * x[1];
        o[1] = -2.0 * x[1];
    })
    .with_jacobian(|x| DMatrix::from_row_slice(2, 2, &[-1.0, 2.0 * x[1], 0.0, -2.0]));
    CaseStudy {
        name: "test-c".into(),
        field,
        analytic_eigenpairs: vec![
            AnalyticEigenpair::new(-1.0, |x| x[0] + x[1] * x[1] / 3.0, |x| vec![1.0, 2.0 * x[1] / 3.0]),
            AnalyticEigenpair::new(-2.0, |x| x[1], |_| vec![0.0, 1.0]),
        ],
        analytic_controller: None,
    }
}

pub fn by_name(name: &str) -> Result<CaseStudy> {
    match name {
        "example-a" => Ok(example_a()),
        "example-b" => Ok(example_b()),
        "test-c" => Ok(test_system_c()),
        other => Err(Error::InvalidInput(format!(
            "unknown case `{other}` (available: {})",
            CASE_NAMES.join(", ")
        ))),
    }
}

/// Error of computed samples against `c·φ`, with `c` the gauge factor of the
/// computed eigenfunction. Relative errors are scaled by `max |c·φ|` over the
/// successful samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub max_abs: f64,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub compared: usize,
}

pub fn compare_to_analytic(samples: &[EigenfunctionSample], truth: &AnalyticEigenpair, pair: &PrincipalEigenpair) -> ErrorSummary {
    let c = truth.gauge_to(pair);
    let ok: Vec<(C64, C64)> = samples
        .iter()
        .filter(|s| s.is_ok())
        .map(|s| (s.phi, c * truth.eval(&s.point)))
        .collect();
    let scale = ok.iter().map(|(_, t)| t.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let errs: Vec<f64> = ok.iter().map(|(p, t)| (p - t).norm()).collect();
    let max_abs = errs.iter().copied().fold(0.0, f64::max);
    let mean = if errs.is_empty() { 0.0 } else { errs.iter().sum::<f64>() / errs.len() as f64 };
    ErrorSummary { max_abs, max_rel: max_abs / scale, mean_rel: mean / scale, compared: errs.len() }
}

/// Default search bracket for the zero level set in `x2`.
pub const GAMMA_BRACKET: (f64, f64) = (-6.0, 6.0);
/// Bracket expansion stops beyond this `|x2|`.
pub const GAMMA_LIMIT: f64 = 20.0;

/// One point of the zero level set `x2 = γ(x1)`.
#[derive(Debug)]
pub struct LevelPoint {
    pub x1: f64,
    pub gamma: Result<f64>,
}

fn bisect<F: Fn(f64) -> Result<f64>>(g: &F, mut lo: f64, mut hi: f64, mut glo: f64, tol: f64) -> Result<f64> {
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid)?;
        if gm == 0.0 {
            return Ok(mid);
        }
        if (gm > 0.0) == (glo > 0.0) {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn gamma_at<F>(phi: &F, x1: f64, bracket: (f64, f64), tol: f64) -> Result<f64>
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    let (mut lo, mut hi) = bracket;
    loop {
        let (glo, ghi) = (phi(x1, lo)?, phi(x1, hi)?);
        if glo == 0.0 {
            return Ok(lo);
        }
        if ghi == 0.0 {
            return Ok(hi);
        }
        if (glo > 0.0) != (ghi > 0.0) {
            return bisect(&|x2| phi(x1, x2), lo, hi, glo, tol);
        }
        if lo <= -GAMMA_LIMIT && hi >= GAMMA_LIMIT {
            return Err(Error::NoSignChange { x1 });
        }
        lo = (lo * 1.5).max(-GAMMA_LIMIT);
        hi = (hi * 1.5).min(GAMMA_LIMIT);
    }
}

/// Bisection root in `x2` of `phi(x1, ·)` for every `x1`, starting from
/// `bracket` and widening it up to `|x2| = 20` if there is no sign change.
/// Failures are recorded per point.
pub fn zero_level_curve<F>(phi: &F, x1_values: &[f64], bracket: (f64, f64), tol: f64) -> Vec<LevelPoint>
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    x1_values
        .par_iter()
        .map(|&x1| LevelPoint { x1, gamma: gamma_at(phi, x1, bracket, tol) })
        .collect()
}

/// `u = −γ/2`, the minimizer of the Hamiltonian on the zero level set.
pub fn optimal_control(gamma: &[(f64, f64)]) -> Vec<(f64, f64)> {
    // `+ 0.0` turns γ = 0 into u = +0 rather than −0.
    gamma.iter().map(|&(x1, g)| (x1, -0.5 * g + 0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::jacobian_at_origin;
    use crate::spectral::{left_eigenpairs, spectral_condition, spectrum};

    #[test]
    fn analytic_values() {
        let a = example_a();
        assert_eq!(a.analytic_eigenpairs[0].eval(&[0.0, 1.0]), -3.0);
        assert_eq!(a.analytic_eigenpairs[1].eval(&[1.0, 0.0]), 2.0);
        assert_eq!(example_b().field.eval(&[1.0, 0.0]), vec![-1.0, -2.0]);
        assert_eq!(example_b_controller(0.0), 0.0);
        assert!((example_b_controller(1.0) - (1.0 - 2f64.sqrt())).abs() < 1e-15);
        assert!((example_b_controller(1.0) + 0.414214).abs() < 1e-6);
        assert!((test_system_c().analytic_eigenpairs[0].eval(&[0.0, 1.0]) - 1.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn pde_residual_gate() {
        for name in CASE_NAMES {
            let c = by_name(name).unwrap();
            assert!(c.max_pde_residual(100, 11) <= 1e-8, "{name}");
        }
    }

    #[test]
    fn pde_residual_oracle_by_finite_differences() {
        // Independent of the hand-written gradients.
        let a = example_a();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in &a.analytic_eigenpairs {
            for _ in 0..50 {
                let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                let h = 1e-5;
                let gx = (p.eval(&[x[0] + h, x[1]]) - p.eval(&[x[0] - h, x[1]])) / (2.0 * h);
                let gy = (p.eval(&[x[0], x[1] + h]) - p.eval(&[x[0], x[1] - h])) / (2.0 * h);
                let f = a.field.eval(&x);
                let r = gx * f[0] + gy * f[1] - p.lambda * p.eval(&x);
                assert!(r.abs() < 1e-6 * (1.0 + p.eval(&x).abs()), "{r}");
            }
        }
    }

    #[test]
    fn denominator_is_at_least_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let (x1, x2) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            assert!(example_a_denominator(x1, x2) >= 1.0);
        }
        assert_eq!(example_a_denominator(0.0, 0.0), 3.0);
    }

    #[test]
    fn linearizations() {
        let a = jacobian_at_origin(&example_a().field).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[4.0 / 3.0, 7.0 / 3.0, 3.5 / 3.0, 0.5 / 3.0]);
        assert!((&a - &expected).amax() < 1e-9, "{a}");
        let ev = spectrum(&a);
        assert!((ev[0] - C64::new(2.5, 0.0)).norm() < 1e-9);
        assert!((ev[1] - C64::new(-1.0, 0.0)).norm() < 1e-9);

        let c = test_system_c();
        let ac = jacobian_at_origin(&c.field).unwrap();
        assert!(spectral_condition(C64::new(-1.0, 0.0), &spectrum(&ac)).unwrap());
        assert!(!spectral_condition(C64::new(-2.0, 0.0), &spectrum(&ac)).unwrap());
    }

    #[test]
    fn gauge_factor() {
        let a = example_a();
        let pairs = left_eigenpairs(&jacobian_at_origin(&a.field).unwrap()).unwrap();
        // w = (1, 1)/√2 for λ = 2.5 and ∇φ₂(0) = (1, 1).
        let c = a.analytic_eigenpairs[1].gauge_to(&pairs[0]);
        assert!((c - C64::new(1.0 / 2f64.sqrt(), 0.0)).norm() < 1e-9);
    }

    #[test]
    fn level_set_of_identity() {
        let pts = zero_level_curve(&|_, x2| Ok(x2), &[-1.0, 0.0, 2.0], GAMMA_BRACKET, 1e-12);
        for p in pts {
            assert!(p.gamma.unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn level_set_bracket_expands_and_fails() {
        let pts = zero_level_curve(&|_, x2| Ok(x2 - 15.0), &[0.0], GAMMA_BRACKET, 1e-10);
        assert!((pts[0].gamma.as_ref().unwrap() - 15.0).abs() < 1e-9);
        let pts = zero_level_curve(&|_, x2| Ok(x2 * x2 + 1.0), &[0.5], GAMMA_BRACKET, 1e-10);
        assert!(matches!(pts[0].gamma, Err(Error::NoSignChange { .. })));
    }

    #[test]
    fn controller_mapping() {
        let g = 2.0 * (2f64.sqrt() - 1.0);
        let u = optimal_control(&[(0.0, 0.0), (1.0, g)]);
        assert_eq!(u[0].1, 0.0);
        assert!((u[1].1 - (1.0 - 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn unknown_case_is_named() {
        let err = by_name("example-z").unwrap_err().to_string();
        assert!(err.contains("example-z"));
    }
}

//! Linearized-exterior transform of a vector field.
//!
//! `f̃(x) = f(x) + σ(‖x‖ − r)(Ax − f(x))` with `σ(z) = ½(1 + tanh(az))` keeps
//! `f` inside the ball of radius `r` and turns into the linearization `Ax`
//! outside it. On the sphere `‖x‖ = R = r + ε₂` the linear eigenfunction
//! `wᵀx` is then nearly exact, so the nonlinear part can be taken as zero
//! there and the finite-horizon path integral applies to saddles.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{decompose, jacobian_at_origin, norm, LinearDecomposition, VectorField};
use crate::edmd::sphere_points;
use crate::error::{Error, Result};
use crate::path_integral::{evaluate_point, BoundaryCondition, EigenfunctionSample, Method, PathIntegralSettings};
use crate::spectral::PrincipalEigenpair;

/// Floor returned by [`choose_a_inner`] when the bound is vacuous.
pub const A_MIN: f64 = 1.0;
/// Safety factor on the sharpness bound.
pub const A_SAFETY: f64 = 1.05;
/// Safety factor on the sampled sphere supremum of `‖f‖`.
pub const SUP_SAFETY: f64 = 1.1;
pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_SEED: u64 = 0x5EED;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformParams {
    /// tanh sharpness.
    pub a: f64,
    /// Blend radius.
    pub r: f64,
    /// Radial margin; the boundary sphere is at `r + eps2`.
    pub eps2: f64,
    /// Target PDE residual inside `‖x‖ ≤ r − eps2`.
    pub eps1: f64,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self { a: 10.0, r: 4.0, eps2: 0.5, eps1: 0.1 }
    }
}

impl TransformParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.r > 0.0 && self.eps2 > 0.0 && self.eps2 < self.r && self.eps1 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "transform needs a > 0, 0 < eps2 < r, eps1 > 0 (got a={}, r={}, eps2={}, eps1={})",
                self.a, self.r, self.eps2, self.eps1
            )));
        }
        Ok(())
    }

    /// Boundary radius `R = r + eps2`.
    pub fn big_r(&self) -> f64 {
        self.r + self.eps2
    }

    /// Radius of the inner ball `r − eps2` where the original eigenfunctions are approximated.
    pub fn inner_radius(&self) -> f64 {
        self.r - self.eps2
    }
}

/// `½(1 + tanh(az))`.
#[inline]
pub fn sigma(z: f64, a: f64) -> f64 {
    0.5 * (1.0 + (a * z).tanh())
}

#[inline]
fn sigma_prime(z: f64, a: f64) -> f64 {
    let c = (a * z).cosh();
    0.5 * a / (c * c)
}

/// The blended field. If `f` carries an analytic Jacobian, so does the result.
pub fn transform_field(f: &VectorField, a: &DMatrix<f64>, params: &TransformParams) -> VectorField {
    let n = f.dim();
    let (sharp, r) = (params.a, params.r);
    let fe = f.clone();
    let am = a.clone();
    let field = VectorField::new(n, move |x, out| {
        fe.eval_into(x, out);
        let s = sigma(norm(x) - r, sharp);
        for i in 0..n {
            let ax: f64 = (0..n).map(|j| am[(i, j)] * x[j]).sum();
            out[i] += s * (ax - out[i]);
        }
    });
    if !f.has_jacobian() {
        return field;
    }
    let fj = f.clone();
    let am = a.clone();
    field.with_jacobian(move |x| {
        let rho = norm(x);
        let s = sigma(rho - r, sharp);
        let jf = fj.analytic_jacobian(x).expect("checked above");
        let mut j = &jf * (1.0 - s) + &am * s;
        if rho > 0.0 {
            let fx = fj.eval(x);
            let ds = sigma_prime(rho - r, sharp) / rho;
            for i in 0..n {
                let ax: f64 = (0..n).map(|k| am[(i, k)] * x[k]).sum();
                for k in 0..n {
                    j[(i, k)] += (ax - fx[i]) * ds * x[k];
                }
            }
        }
        j
    })
}

/// Sharpness that guarantees a residual `eps1` inside `‖x‖ ≤ r − eps2`:
/// `1.05 · atanh(1 − 2·eps1/beta) / eps2`, floored at [`A_MIN`].
pub fn choose_a_inner(eps1: f64, eps2: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidRatio { beta });
    }
    if !(eps1 > 0.0 && eps2 > 0.0) {
        return Err(Error::InvalidInput(format!("eps1 and eps2 must be positive (got {eps1}, {eps2})")));
    }
    let ratio = 2.0 * eps1 / beta;
    if ratio >= 1.0 {
        return Ok(A_MIN);
    }
    Ok((A_SAFETY * (1.0 - ratio).atanh() / eps2).max(A_MIN))
}

/// `½(1 − tanh(a·eps2)) ‖w‖ (|λ| R + sup_f)` with `sup_f` a bound on `‖f‖` over `‖x‖ = R`.
pub fn residual_bound_from_sup(params: &TransformParams, pair: &PrincipalEigenpair, sup_f: f64) -> f64 {
    0.5 * (1.0 - (params.a * params.eps2).tanh()) * pair.w.norm() * (pair.lambda.norm() * params.big_r() + sup_f)
}

/// Largest `‖f‖` over `n_samples` seeded random points of the sphere of radius `radius`.
pub fn sampled_sphere_sup(f: &VectorField, radius: f64, n_samples: usize, seed: u64) -> f64 {
    sphere_points(f.dim(), radius, n_samples, seed)
        .par_iter()
        .map(|p| norm(&f.eval(p)))
        .reduce(|| 0.0, f64::max)
}

/// Bound on the eigenfunction PDE residual of `wᵀx` for `f̃` on the sphere
/// `‖x‖ = R`, with the supremum of `‖f‖` sampled and inflated by [`SUP_SAFETY`].
pub fn boundary_residual_bound(f: &VectorField, pair: &PrincipalEigenpair, params: &TransformParams, n_samples: usize) -> f64 {
    let sup = sampled_sphere_sup(f, params.big_r(), n_samples, DEFAULT_SEED);
    residual_bound_from_sup(params, pair, SUP_SAFETY * sup)
}

/// Uniform seeded points in the ball of radius `radius`.
fn ball_points(dim: usize, radius: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let u: f64 = rng.random();
            let scale = radius * u.powf(1.0 / dim as f64) / norm(&v).max(1e-300);
            v.iter().map(|c| c * scale).collect()
        })
        .collect()
}

/// Proxy for `β = sup_{‖x‖ ≤ r−ε₂} |f_n(x)ᵀ∇φ|` using `∇φ ≈ w` (exact at the
/// origin), sampled at `n_samples` seeded points.
pub fn beta_proxy(dec: &LinearDecomposition, pair: &PrincipalEigenpair, params: &TransformParams, n_samples: usize) -> f64 {
    ball_points(dec.dim(), params.inner_radius(), n_samples, DEFAULT_SEED)
        .par_iter()
        .map(|p| pair.project(&dec.nonlinear_part(p)).norm())
        .reduce(|| 0.0, f64::max)
}

/// Result of the heuristic scan for spurious equilibria of `f̃`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assumption1Report {
    /// Always true: a grid scan cannot rule out equilibria or limit sets.
    pub heuristic: bool,
    pub points_scanned: usize,
    pub min_norm: f64,
    pub min_location: Vec<f64>,
    /// Refined candidate equilibria away from the origin.
    pub flagged: Vec<Vec<f64>>,
    /// Share of scanned points with `f(x)ᵀAx ≥ 0`.
    pub fraction_nonneg: f64,
}

impl Assumption1Report {
    pub fn is_clean(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// `f̃` together with the original field, its linearization and parameters.
#[derive(Clone, Debug)]
pub struct TransformedSystem {
    original: VectorField,
    params: TransformParams,
    decomposition: LinearDecomposition,
    checked: Arc<AtomicBool>,
    warned: Arc<AtomicBool>,
}

const EXCLUSION_RADIUS: f64 = 0.05;
const FLAG_TOL: f64 = 1e-6;

impl TransformedSystem {
    pub fn new(f: &VectorField, params: TransformParams) -> Result<Self> {
        params.validate()?;
        let a = jacobian_at_origin(f)?;
        let decomposition = decompose(&transform_field(f, &a, &params))?;
        Ok(Self {
            original: f.clone(),
            params,
            decomposition,
            checked: Arc::new(AtomicBool::new(false)),
            warned: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn params(&self) -> &TransformParams {
        &self.params
    }

    pub fn original(&self) -> &VectorField {
        &self.original
    }

    pub fn field(&self) -> &VectorField {
        self.decomposition.field()
    }

    pub fn decomposition(&self) -> &LinearDecomposition {
        &self.decomposition
    }

    pub fn assumption_checked(&self) -> bool {
        self.checked.load(Ordering::Relaxed)
    }

    /// Zero boundary condition on `‖x‖ = R` with `ε_S` from [`boundary_residual_bound`].
    pub fn boundary(&self, pair: &PrincipalEigenpair) -> BoundaryCondition {
        let eps = boundary_residual_bound(&self.original, pair, &self.params, DEFAULT_SAMPLES);
        BoundaryCondition::zero_on_sphere(self.params.big_r(), eps)
    }

    /// Grid scan of `‖f̃‖` over `[−domain_radius, domain_radius]^n` with
    /// `grid_n` points per axis. Local grid minima are polished by Newton's
    /// method; converged zeros outside a small ball around the origin are flagged.
    pub fn check_assumption1(&self, domain_radius: f64, grid_n: usize) -> Assumption1Report {
        let n = self.decomposition.dim();
        let ft = self.field();
        let a = self.decomposition.a();
        let counts = vec![grid_n.max(2); n];
        let total: usize = counts.iter().product();
        let h = 2.0 * domain_radius / (grid_n.max(2) - 1) as f64;
        let coord = |flat: usize| -> Vec<f64> {
            let mut idx = flat;
            let mut x = vec![0.0; n];
            for k in (0..n).rev() {
                x[k] = -domain_radius + (idx % counts[k]) as f64 * h;
                idx /= counts[k];
            }
            x
        };
        let norms: Vec<f64> = (0..total).into_par_iter().map(|i| norm(&ft.eval(&coord(i)))).collect();
        let nonneg = (0..total)
            .into_par_iter()
            .filter(|&i| {
                let x = coord(i);
                let fx = self.original.eval(&x);
                let ax = a * nalgebra::DVector::from_column_slice(&x);
                fx.iter().zip(ax.iter()).map(|(p, q)| p * q).sum::<f64>() >= 0.0
            })
            .count();

        let mut min_norm = f64::INFINITY;
        let mut min_location = vec![0.0; n];
        let mut candidates = Vec::new();
        for i in 0..total {
            let x = coord(i);
            if norm(&x) <= EXCLUSION_RADIUS {
                continue;
            }
            if norms[i] < min_norm {
                min_norm = norms[i];
                min_location = x.clone();
            }
            let mut stride = 1;
            let mut is_min = true;
            let mut rem = i;
            for k in (0..n).rev() {
                let ik = rem % counts[k];
                rem /= counts[k];
                if ik > 0 && norms[i - stride] < norms[i] {
                    is_min = false;
                }
                if ik + 1 < counts[k] && norms[i + stride] < norms[i] {
                    is_min = false;
                }
                stride *= counts[k];
            }
            if is_min {
                candidates.push(x);
            }
        }
        let mut flagged: Vec<Vec<f64>> = Vec::new();
        for x0 in candidates {
            if let Some(z) = newton_zero(ft, &x0, h) {
                let far = norm(&z) > EXCLUSION_RADIUS;
                let new = flagged.iter().all(|p| norm(&p.iter().zip(&z).map(|(a, b)| a - b).collect::<Vec<_>>()) > h);
                if far && new {
                    flagged.push(z);
                }
            }
        }
        let report = Assumption1Report {
            heuristic: true,
            points_scanned: total,
            min_norm,
            min_location,
            flagged,
            fraction_nonneg: nonneg as f64 / total as f64,
        };
        if report.is_clean() {
            self.checked.store(true, Ordering::Relaxed);
        }
        report
    }

    /// Eigenfunction of `f̃` with `ĥ = 0` on `‖x‖ = R`: forward in time for
    /// unstable `λ`, backward for stable `λ`.
    pub fn eigenfunction(
        &self,
        pair: &PrincipalEigenpair,
        x: &[f64],
        bc: &BoundaryCondition,
        settings: &PathIntegralSettings,
    ) -> Result<EigenfunctionSample> {
        if !self.assumption_checked() && !self.warned.swap(true, Ordering::Relaxed) {
            warn!("spurious-equilibrium check not run on the transformed field");
        }
        evaluate_point(&self.decomposition, pair, x, &Method::finite_for(pair, bc.clone()), settings)
    }
}

/// Newton iteration for `f(x) = 0` started at `x0`; accepted only if it stays
/// within `2·h` of the start and reaches `‖f‖ < 1e-6`.
fn newton_zero(f: &VectorField, x0: &[f64], h: f64) -> Option<Vec<f64>> {
    let mut x = x0.to_vec();
    for _ in 0..30 {
        let fx = f.eval(&x);
        if norm(&fx) < 1e-12 {
            break;
        }
        let j = f.jacobian(&x);
        let dx = j.lu().solve(&nalgebra::DVector::from_vec(fx))?;
        for (xi, d) in x.iter_mut().zip(dx.iter()) {
            *xi -= d;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return None;
        }
    }
    let drift = norm(&x.iter().zip(x0).map(|(a, b)| a - b).collect::<Vec<_>>());
    (norm(&f.eval(&x)) < FLAG_TOL && drift <= 2.0 * h).then_some(x)
}

/// Eigenfunction of the transformed field at one point with the zero boundary
/// condition on `‖x‖ = R`.
pub fn saddle_eigenfunction_zero_bc(
    f: &VectorField,
    pair: &PrincipalEigenpair,
    x: &[f64],
    params: &TransformParams,
    t_max: f64,
) -> Result<EigenfunctionSample> {
    let sys = TransformedSystem::new(f, *params)?;
    let bc = sys.boundary(pair);
    let settings = PathIntegralSettings { t_max, ..Default::default() };
    sys.eigenfunction(pair, x, &bc, &settings)
}
